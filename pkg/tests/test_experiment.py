import numpy as np
import pytest

from intermix.decode import FlushConfig
from intermix.experiment import decode_corpus, policy_grid, reference_latency, supervisions
from intermix.metrics import all_from_times
from intermix.model.oracle import ScriptedOracle
from intermix.policy import PolicyConfig
from intermix.synth import SynthConfig, generate_corpus, make_lexicon


@pytest.fixture(scope="module")
def small():
    cfg = SynthConfig(seed=11)
    return make_lexicon(cfg).vocab, generate_corpus(cfg, 40)


def test_reference_latency_matches_per_token_average(small):
    vocab, examples = small
    sups = supervisions(examples, vocab)
    lags = []
    for ex, s in zip(examples, sups):
        times = np.asarray(s.word_emit_chunk) * 0.64
        lags += [all_from_times(times, ex.frames.duration_s)] * len(times)
    assert reference_latency(examples, sups, 640) == pytest.approx(np.mean(lags), rel=1e-12)


def test_corrupt_supervision_is_earlier(small):
    vocab, examples = small
    gold = reference_latency(examples, supervisions(examples, vocab), 640)
    bad = reference_latency(examples, supervisions(examples, vocab, 0.5, seed=3), 640)
    assert bad < gold
    # fraction zero only re-anchors words at their phrase end: same timing
    zero = supervisions(examples, vocab, 0.0)
    assert [s.word_emit_chunk for s in zero] == [s.word_emit_chunk for s in supervisions(examples, vocab)]


def test_corruption_is_seeded(small):
    vocab, examples = small
    a = supervisions(examples, vocab, 0.5, seed=3)
    b = supervisions(examples, vocab, 0.5, seed=3)
    assert [s.steps for s in a] == [s.steps for s in b]


def test_oracle_corpus_decode_is_exact(small):
    vocab, examples = small
    sups = supervisions(examples, vocab)
    for ex, s in zip(examples[:10], sups):
        oracle = ScriptedOracle(s.steps, vocab, feature_dim=ex.frames.feature_dim)
        dec = decode_corpus(oracle, [ex], PolicyConfig("intermixed"))
        assert dec.exact_match == 1.0 and not dec.truncated
        # the oracle emits each word exactly when the supervision does
        assert [e.chunk for e in dec.logs[0].emissions][:-1] == list(s.word_emit_chunk)[: len(ex.target_tokens) - 1]


class Mute:
    architecture = "intermixed"
    has_early_exit = False

    def __init__(self, vocab, dim):
        self.vocab = vocab
        self.eoa_vector = np.zeros(dim)

    def step_logits(self, slots):
        logits = np.zeros(self.vocab.size)
        logits[self.vocab.eos_id] = -1.0
        logits[self.vocab.wait_id] = 1.0
        return logits


def test_truncated_utterances_are_scored_not_fatal(small):
    vocab, examples = small
    dec = decode_corpus(Mute(vocab, examples[0].frames.feature_dim), examples[:3], PolicyConfig("intermixed"), FlushConfig(max_flush_tokens=2))
    assert dec.truncated == [ex.utt_id for ex in examples[:3]]
    assert dec.exact_match == 0.0
    assert all(len(g.emissions) == 2 for g in dec.logs)


def test_policy_grid():
    assert [p.kappa for p in policy_grid("intermixed", kappas=[-1, 4])] == [-1.0, 4.0]
    assert [p.nu for p in policy_grid("intermixed+early_exit", nus=[0, 2], kappa=1.0)] == [0.0, 2.0]
    assert [p.k for p in policy_grid("wait_k", ks=[1, 2])] == [1, 2]
    assert [p.f for p in policy_grid("alignatt", fs=[8])] == [8]
    assert policy_grid("offline") == [PolicyConfig("offline")]
