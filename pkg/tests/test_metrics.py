import numpy as np
import pytest
from hypothesis import given
from hypothesis import strategies as st

from intermix.core import EmissionLog
from intermix.metrics import (
    REPORT_COLUMNS,
    al_from_times,
    all_from_times,
    average_lagging,
    average_logical_latency,
    calls_per_output_token,
    corpus_latency,
    corpus_quality,
    edit_distance,
    laal,
    policy_calls_per_output_token,
    quality_proxy,
    rows_to_csv,
    summarize,
)

from oracles import al_oracle, all_oracle, edit_distance_oracle


def test_all_quick_trace():
    assert all_from_times([1.92, 3.2, 3.2, 3.2], 3.2) == pytest.approx(0.88, abs=1e-12)
    np.testing.assert_allclose(
        np.array([1.92, 3.2, 3.2, 3.2]) - np.arange(1, 5) * 0.8, [1.12, 1.6, 0.8, 0.0], atol=1e-12
    )


def test_all_offline():
    assert all_from_times([3.2] * 4, 3.2) == pytest.approx(1.2, abs=1e-12)
    assert all_from_times([3.2], 3.2) == 0.0


def test_al_examples():
    assert al_from_times([4, 6, 10, 10], 10, 4) == pytest.approx(12.5 / 3, abs=1e-12)
    assert al_from_times([0, 0, 0], 10, 3) < 0


def test_cut_off_audit_pair():
    a, b = [1, 2, 10, 10], [1, 2, 9.9, 9.9]
    assert al_from_times(a, 10, 4) == pytest.approx(1.8333333333333, abs=1e-9)
    assert al_from_times(b, 10, 4) == pytest.approx(1.95, abs=1e-12)
    assert all_from_times(a, 10) == pytest.approx(-0.5, abs=1e-12)
    assert all_from_times(b, 10) == pytest.approx(-0.55, abs=1e-12)


def _log(chunks, T, tokens=None, model_calls=0, policy_calls=0):
    tokens = tokens if tokens is not None else list(range(len(chunks)))
    return EmissionLog.from_chunks(tokens, chunks, T, 640, model_calls, policy_calls)


def test_log_level_metrics():
    log = _log([3, 5, 5, 5], 5, model_calls=8)
    assert average_logical_latency(log) == pytest.approx(0.88, abs=1e-12)
    assert calls_per_output_token(log) == 2.0
    assert calls_per_output_token(_log([1, 2], 2, model_calls=2)) == 1.0
    assert policy_calls_per_output_token(_log([3, 5, 5, 5], 5, model_calls=4, policy_calls=5)) == 1.25
    with pytest.raises(ValueError):
        average_logical_latency(_log([], 3))
    with pytest.raises(ValueError):
        calls_per_output_token(_log([], 3))


def test_laal_modes():
    log = _log([2, 3, 5, 5], 5)
    assert laal(log, 4, 4) == average_lagging(log, reference_length=4)
    # a longer reference spreads the staircase over more tokens, so each baseline
    # comes earlier and the lag can only grow
    assert laal(log, 4, 6) >= average_lagging(log)
    assert laal(log, 4, 6) == pytest.approx(al_oracle(log.emit_times(), 3.2, 6))
    over = _log([1, 2, 3, 4, 5, 5, 5, 5], 5)
    assert laal(over, ref_len=4) == al_from_times(over.emit_times(), over.duration_s, 8)


def test_quality_proxy():
    assert quality_proxy([1, 2, 3], [1, 2, 3]) == quality_proxy([1, 2, 3], [1, 2, 3])
    assert quality_proxy([1, 2, 3], [1, 2, 3]).similarity == 1.0
    assert quality_proxy([1, 2], [3, 4]).similarity == 0.0
    q = quality_proxy([1, 9, 3, 4], [1, 2, 3, 4])
    assert (q.exact_match_rate, q.similarity) == (0.0, 0.75)
    assert quality_proxy([], []).similarity == 1.0
    c = corpus_quality([[1], [2]], [[1], [3]])
    assert (c.exact_match_rate, c.similarity) == (0.5, 0.5)


@given(st.lists(st.integers(0, 3), max_size=7), st.lists(st.integers(0, 3), max_size=7))
def test_edit_distance_matches_oracle(a, b):
    assert edit_distance(a, b) == edit_distance_oracle(a, b)


times_st = st.lists(st.floats(0, 20, allow_nan=False), min_size=1, max_size=12).map(sorted)


@given(times_st, st.floats(0.5, 20), st.integers(1, 15))
def test_latency_matches_oracles(times, duration, ref):
    assert all_from_times(times, duration) == pytest.approx(all_oracle(times, duration), rel=1e-9, abs=1e-9)
    assert al_from_times(times, duration, ref) == pytest.approx(al_oracle(times, duration, ref), rel=1e-9, abs=1e-9)


@given(times_st, st.floats(0.5, 20), st.integers(1, 12), st.integers(0, 12))
def test_laal_never_below_hypothesis_al(times, duration, hyp, ref):
    assert al_from_times(times, duration, max(hyp, ref)) >= al_from_times(times, duration, hyp) - 1e-12


@given(times_st, st.floats(0.5, 20), st.floats(-5, 5))
def test_all_shift_equivariance(times, duration, delta):
    shifted = [t + delta for t in times]
    assert all_from_times(shifted, duration) == pytest.approx(all_from_times(times, duration) + delta, abs=1e-9)


@given(st.lists(st.integers(1, 10), min_size=1, max_size=10).map(sorted))
def test_offline_dominates(chunks):
    T = max(chunks)
    assert average_logical_latency(_log([T] * len(chunks), T)) >= average_logical_latency(_log(chunks, T))


def test_corpus_aggregation_modes():
    short = _log([1], 2)  # ALL -0.64 over one token
    long = _log([2, 2, 2, 2], 2)  # 4 tokens, lags 0.96 .. 0
    rep = corpus_latency([short, long])
    lags = np.concatenate([[0.64 - 1.28], 1.28 - np.arange(1, 5) * 0.32])
    assert rep.all_seconds == pytest.approx(lags.mean())
    assert rep.al_seconds == pytest.approx(np.mean([average_lagging(short), average_lagging(long)]))
    assert len(rep.per_utterance_all) == 2
    with pytest.raises(ValueError):
        corpus_latency([])


def test_csv_report_sorted_with_seed_header():
    logs = [_log([3, 5, 5, 5], 5, model_calls=8)]
    hyps = refs = [(0, 1, 2, 3)]
    rows = [summarize("wait_k", 2, "test", logs, hyps, refs), summarize("intermixed", 0.0, "test", logs, hyps, refs)]
    text = rows_to_csv(rows, root_seed=11)
    lines = text.splitlines()
    assert lines[0] == "# root_seed=11"
    assert lines[1] == ",".join(REPORT_COLUMNS)
    assert lines[2].startswith("intermixed,0.000000,test,0.880000")
    assert lines[3].startswith("wait_k,2,")
    assert rows[0].calls_per_token == 2.0 and rows[0].exact_match == 1.0
