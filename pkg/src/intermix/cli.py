"""Command-line harness: corpus generation, supervision, training, decoding, reports.

Exit codes: 0 success, 2 config error, 3 data error, 4 numeric failure.
"""

from __future__ import annotations

import argparse
import json
import logging
import os
import sys
import zipfile
from dataclasses import asdict, dataclass, field, fields, replace
from pathlib import Path

from .align import format_layout
from .core import Vocabulary
from .decode import FlushConfig, IncompatiblePolicyError, TruncatedOutputError, check_compatible, read_logs, write_logs
from .experiment import decode_corpus, policy_grid, supervisions, train_cross_attention, train_intermixed
from .metrics import rows_to_csv, summarize
from .model.crossattn import CrossAttnConfig
from .model.intermixed import ToyModelConfig
from .model.oracle import ScriptedOracle
from .model.train import CheckpointError, NumericError, TrainConfig, load_checkpoint, save_checkpoint
from .policy import POLICY_NAMES, PolicyConfig
from .synth import SynthConfig, generate_corpus, inject_silence, load_corpus, make_lexicon, save_corpus

log = logging.getLogger("intermix")

EXIT_CONFIG, EXIT_DATA, EXIT_NUMERIC = 2, 3, 4
ORACLE = "oracle"
TEST_OFFSET = 1_000_000


class ConfigError(ValueError):
    pass


class DataError(ValueError):
    pass


@dataclass
class RunConfig:
    synth: SynthConfig = field(default_factory=SynthConfig)
    n_train: int = 2000
    n_test: int = 200
    model: dict = field(default_factory=lambda: {"width": 64, "layers": 4, "heads": 4, "early_exit_layer": 2})
    cross: dict = field(default_factory=lambda: {"width": 64, "enc_layers": 2, "dec_layers": 2, "mask_policy": "wait_k", "k": 1})
    train: TrainConfig = field(default_factory=TrainConfig)
    kappas: list = field(default_factory=lambda: [-1.0, 0.0, 1.0, 2.0, 4.0])
    nus: list = field(default_factory=lambda: [-2.0, -1.0, 0.0, 1.0, 2.0])
    ks: list = field(default_factory=lambda: [1, 2])
    fs: list = field(default_factory=lambda: [8, 10, 12, 16, 32])
    seed: int = 0
    silence_chunks: int = 0
    corrupt_alignments: float = 0.0

    def validate(self) -> None:
        try:
            self.synth.validate()
        except ValueError as exc:
            raise ConfigError(f"synth: {exc}") from exc
        if self.n_train < 1 or self.n_test < 1:
            raise ConfigError("n_train and n_test must be >= 1")
        for name in ("kappas", "nus", "ks", "fs"):
            if not getattr(self, name):
                raise ConfigError(f"grid {name} must not be empty")
        if self.silence_chunks < 0:
            raise ConfigError("silence_chunks must be >= 0")
        if not 0.0 <= self.corrupt_alignments <= 1.0:
            raise ConfigError("corrupt_alignments must lie in [0, 1]")
        if self.train.steps < 1 or self.train.batch_size < 1 or self.train.lr <= 0:
            raise ConfigError("train: steps, batch_size and lr must be positive")
        try:
            self.model_config(make_lexicon(self.synth).vocab)
            self.cross_config(make_lexicon(self.synth).vocab)
            for k in self.ks:
                PolicyConfig("wait_k", k=int(k))
            for f in self.fs:
                PolicyConfig("alignatt", f=int(f))
        except (TypeError, ValueError) as exc:
            raise ConfigError(str(exc)) from exc

    def seeded(self, seed: int | None) -> "RunConfig":
        """Route the root seed into every component that draws randomness."""
        seed = self.seed if seed is None else seed
        return replace(self, seed=seed, synth=replace(self.synth, seed=seed), train=replace(self.train, seed=seed))

    def model_config(self, vocab: Vocabulary) -> ToyModelConfig:
        return ToyModelConfig(tuple(vocab.words), self.synth.feature_dim, seed=self.seed, **self.model)

    def cross_config(self, vocab: Vocabulary) -> CrossAttnConfig:
        return CrossAttnConfig(
            tuple(vocab.words), self.synth.feature_dim, self.synth.frames_per_chunk, seed=self.seed, **self.cross
        )

    def to_json(self) -> dict:
        d = asdict(self)
        d["synth"] = self.synth.to_json()
        d["train"] = self.train.to_json()
        return d

    @classmethod
    def from_json(cls, d: dict) -> "RunConfig":
        known = {f.name for f in fields(cls)}
        unknown = set(d) - known
        if unknown:
            raise ConfigError(f"unknown config keys: {sorted(unknown)}")
        d = dict(d)
        try:
            if "synth" in d:
                d["synth"] = SynthConfig.from_json(d["synth"])
            if "train" in d:
                t = dict(d["train"])
                if "betas" in t:
                    t["betas"] = tuple(t["betas"])
                d["train"] = TrainConfig(**t)
            return cls(**d)
        except TypeError as exc:
            raise ConfigError(str(exc)) from exc


def load_run_config(path: str | None, seed: int | None) -> RunConfig:
    if path is None:
        cfg = RunConfig()
    else:
        try:
            cfg = RunConfig.from_json(json.loads(Path(path).read_text()))
        except FileNotFoundError as exc:
            raise ConfigError(f"config file not found: {path}") from exc
        except json.JSONDecodeError as exc:
            raise ConfigError(f"{path}: invalid JSON ({exc})") from exc
    cfg = cfg.seeded(seed)
    cfg.validate()
    return cfg


def _atomic_text(path: Path, text: str) -> None:
    tmp = path.with_name(path.name + ".tmp")
    tmp.write_text(text)
    os.replace(tmp, path)


def _out_dir(path: str) -> Path:
    out = Path(path)
    try:
        out.mkdir(parents=True, exist_ok=True)
    except OSError as exc:
        raise ConfigError(f"cannot create output directory {out}: {exc}") from exc
    if not os.access(out, os.W_OK):
        raise ConfigError(f"output directory {out} is not writable")
    return out


def _load_corpus(path: str):
    try:
        return load_corpus(path)
    except FileNotFoundError as exc:
        raise DataError(f"corpus not found: {exc.filename}") from exc
    except (ValueError, KeyError, TypeError, OSError, zipfile.BadZipFile) as exc:
        raise DataError(f"{path}: corrupt corpus ({exc})") from exc


def _load_model(path: str):
    try:
        return load_checkpoint(path)
    except FileNotFoundError as exc:
        raise DataError(f"checkpoint not found: {path}") from exc
    except CheckpointError as exc:
        raise DataError(str(exc)) from exc


def _single(values, flag):
    if values is None:
        return None
    if len(values) != 1:
        raise ConfigError(f"{flag} takes a single value here")
    return values[0]


def _policy_from_args(args) -> PolicyConfig:
    try:
        given = {
            name: _single(getattr(args, name), f"--{name}")
            for name in ("kappa", "nu", "k", "f")
            if getattr(args, name) is not None
        }
        return PolicyConfig(args.policy, **given)
    except ValueError as exc:
        raise ConfigError(str(exc)) from exc


# -- commands --------------------------------------------------------------


def cmd_gen_data(args) -> None:
    cfg = load_run_config(args.config, args.seed)
    if args.silence_chunks is not None:
        cfg = replace(cfg, silence_chunks=args.silence_chunks)
        cfg.validate()
    out = _out_dir(args.out)
    header = {"run_config": cfg.to_json()}
    save_corpus(out / "train.jsonl", generate_corpus(cfg.synth, cfg.n_train), cfg.synth, {**header, "split": "train"})
    test = generate_corpus(cfg.synth, cfg.n_test, start=TEST_OFFSET)
    if cfg.silence_chunks:
        test = [inject_silence(ex, cfg.silence_chunks, seed=cfg.seed) for ex in test]
    save_corpus(out / "test.jsonl", test, cfg.synth, {**header, "split": "test"})


def cmd_compile(args) -> None:
    synth, examples = _load_corpus(args.corpus)
    fraction = args.corrupt_alignments or 0.0
    if not 0.0 <= fraction <= 1.0:
        raise ConfigError("--corrupt-alignments must lie in [0, 1]")
    seed = synth.seed if args.seed is None else args.seed
    out = _out_dir(args.out)
    vocab = make_lexicon(synth).vocab
    sups = supervisions(examples, vocab, fraction, seed=seed)
    lines = [json.dumps({"header": {"root_seed": seed, "corrupt_alignments": fraction}})]
    for ex, sup in zip(examples, sups):
        lines.append(
            json.dumps(
                {
                    "utt": ex.utt_id,
                    "steps": vocab.decode(sup.steps),
                    "layout": format_layout(sup.input_layout, vocab),
                    "word_emit_chunk": list(sup.word_emit_chunk),
                    "T": sup.num_chunks,
                }
            )
        )
    _atomic_text(out / "supervision.jsonl", "\n".join(lines) + "\n")


def cmd_train(args) -> None:
    cfg = load_run_config(args.config, args.seed)
    if args.corrupt_alignments is not None:
        cfg = replace(cfg, corrupt_alignments=args.corrupt_alignments)
        cfg.validate()
    synth, examples = _load_corpus(args.corpus)
    out = _out_dir(args.out)
    lex = make_lexicon(synth)
    if args.model == "intermixed":
        model, history = train_intermixed(examples, lex, cfg.model_config(lex.vocab), cfg.train, cfg.corrupt_alignments)
    else:
        model, history = train_cross_attention(examples, cfg.cross_config(lex.vocab), cfg.train)
    extra = {"root_seed": cfg.seed, "final_loss": history[-1], "corrupt_alignments": cfg.corrupt_alignments}
    save_checkpoint(out / f"{args.model}.pt", model, extra)
    _atomic_text(out / f"{args.model}.loss.json", json.dumps({"root_seed": cfg.seed, "loss": history}) + "\n")


class _OracleModels:
    """Per-utterance scripted oracles replaying each example's gold supervision."""

    architecture = "intermixed"

    def __init__(self, examples, vocab):
        self.vocab = vocab
        self.by_utt = {ex.utt_id: ScriptedOracle(s.steps, vocab, feature_dim=ex.frames.feature_dim) for ex, s in zip(examples, supervisions(examples, vocab))}


def _decode_all(model_path: str, examples, vocab, policy: PolicyConfig, flush: FlushConfig):
    """Decode a corpus with a checkpoint or with the scripted oracle."""
    if model_path == ORACLE:
        oracles = _OracleModels(examples, vocab).by_utt
        parts = [decode_corpus(oracles[ex.utt_id], [ex], policy, flush) for ex in examples]
        merged = parts[0]
        for p in parts[1:]:
            merged.utt_ids += p.utt_ids
            merged.hyps += p.hyps
            merged.refs += p.refs
            merged.logs += p.logs
            merged.truncated += p.truncated
        return merged, {}
    model, extra = _load_model(model_path)
    if model.vocab != vocab:
        raise DataError("checkpoint vocabulary does not match the corpus")
    return decode_corpus(model, examples, policy, flush), extra


def _check_policy(model_path: str, policy: PolicyConfig, vocab) -> None:
    if model_path == ORACLE:
        if policy.name in ("alignatt", "intermixed+early_exit"):
            raise ConfigError(f"policy {policy.name} is not available for the scripted oracle")
        return
    model, _ = _load_model(model_path)
    try:
        check_compatible(model, policy)
    except IncompatiblePolicyError as exc:
        raise ConfigError(str(exc)) from exc


def cmd_decode(args) -> None:
    synth, examples = _load_corpus(args.corpus)
    vocab = make_lexicon(synth).vocab
    policy = _policy_from_args(args)
    _check_policy(args.checkpoint, policy, vocab)
    out = _out_dir(args.out)
    dec, extra = _decode_all(args.checkpoint, examples, vocab, policy, FlushConfig())
    seed = extra.get("root_seed", synth.seed) if args.seed is None else args.seed
    header = {"root_seed": seed, "policy": asdict(policy), "checkpoint": str(args.checkpoint), "truncated": dec.truncated}
    write_logs(out / "logs.jsonl", zip(dec.utt_ids, dec.logs), vocab, header)


def cmd_eval(args) -> None:
    synth, examples = _load_corpus(args.corpus)
    vocab = make_lexicon(synth).vocab
    try:
        header, logs = read_logs(args.logs, vocab)
    except FileNotFoundError as exc:
        raise DataError(f"logs not found: {args.logs}") from exc
    except ValueError as exc:
        raise DataError(str(exc)) from exc
    refs_by_utt = {ex.utt_id: ex.target_tokens for ex in examples}
    missing = [u for u, _ in logs if u not in refs_by_utt]
    if missing or not logs:
        raise DataError(f"logs do not match the corpus (unknown utterances: {missing[:3]})")
    pol = header.get("policy", {"name": "unknown"})
    policy = PolicyConfig(**pol) if pol.get("name") in POLICY_NAMES else None
    row = summarize(
        policy.name if policy else "unknown",
        policy.parameter if policy else 0,
        Path(args.corpus).stem,
        [g for _, g in logs],
        [g.tokens for _, g in logs],
        [refs_by_utt[u] for u, _ in logs],
    )
    seed = header.get("root_seed", synth.seed) if args.seed is None else args.seed
    _atomic_text(_out_dir(args.out) / "report.csv", rows_to_csv([row], root_seed=seed))


def _grid_for(name: str, cfg: RunConfig, args) -> list[PolicyConfig]:
    return policy_grid(
        name,
        kappas=args.kappa or cfg.kappas,
        nus=args.nu or cfg.nus,
        ks=args.k or cfg.ks,
        fs=args.f or cfg.fs,
    )


def cmd_sweep(args) -> None:
    cfg = load_run_config(args.config, args.seed)
    synth, examples = _load_corpus(args.corpus)
    vocab = make_lexicon(synth).vocab
    out = _out_dir(args.out)
    if args.checkpoint == ORACLE:
        names = [args.policy] if args.policy else ["intermixed", "wait_k", "offline"]
    else:
        model, _ = _load_model(args.checkpoint)
        if args.policy:
            names = [args.policy]
        elif model.architecture == "intermixed":
            names = ["intermixed", "wait_k", "offline"] + (["intermixed+early_exit"] if model.has_early_exit else [])
        else:
            names = ["wait_k", "alignatt", "offline"]
    corpus = Path(args.corpus).stem
    rows = []
    flush = FlushConfig()
    for name in names:
        for policy in _grid_for(name, cfg, args):
            _check_policy(args.checkpoint, policy, vocab)
            dec, _ = _decode_all(args.checkpoint, examples, vocab, policy, flush)
            rows.append(dec.row(policy, corpus))
            log.info("%s %s: EM %.3f ALL %.3f", policy.name, policy.parameter, rows[-1].exact_match, rows[-1].all_s)
    _atomic_text(out / "sweep.csv", rows_to_csv(rows, root_seed=cfg.seed))


# -- entry point -------------------------------------------------------------


def build_parser() -> argparse.ArgumentParser:
    p = argparse.ArgumentParser(prog="intermix", description=__doc__.splitlines()[0])
    p.add_argument("-v", "--verbose", action="store_true")
    sub = p.add_subparsers(dest="command", required=True)

    def common(sp, config=True):
        if config:
            sp.add_argument("--config", help="RunConfig JSON file")
        sp.add_argument("--seed", type=int, help="root seed (overrides the config)")
        sp.add_argument("--out", required=True, help="output directory")

    def policy_flags(sp, required):
        sp.add_argument("--policy", choices=POLICY_NAMES, required=required)
        sp.add_argument("--kappa", type=float, nargs="+")
        sp.add_argument("--nu", type=float, nargs="+")
        sp.add_argument("--k", type=int, nargs="+")
        sp.add_argument("--f", type=int, nargs="+")

    sp = sub.add_parser("gen-data", help="generate train/test corpora")
    common(sp)
    sp.add_argument("--silence-chunks", type=int, help="prepend silent chunks to the test split")
    sp.set_defaults(func=cmd_gen_data)

    sp = sub.add_parser("compile", help="compile alignments into step-sequence supervision")
    common(sp, config=False)
    sp.add_argument("--corpus", required=True)
    sp.add_argument("--corrupt-alignments", type=float, help="fraction of target words anchored too early")
    sp.set_defaults(func=cmd_compile)

    sp = sub.add_parser("train", help="train a model")
    common(sp)
    sp.add_argument("--corpus", required=True)
    sp.add_argument("--model", choices=("intermixed", "cross_attention"), default="intermixed")
    sp.add_argument("--corrupt-alignments", type=float)
    sp.set_defaults(func=cmd_train)

    sp = sub.add_parser("decode", help="decode a corpus into emission logs")
    common(sp, config=False)
    sp.add_argument("--checkpoint", required=True, help=f"checkpoint path, or '{ORACLE}'")
    sp.add_argument("--corpus", required=True)
    policy_flags(sp, required=True)
    sp.set_defaults(func=cmd_decode)

    sp = sub.add_parser("eval", help="score emission logs against a corpus")
    common(sp, config=False)
    sp.add_argument("--logs", required=True)
    sp.add_argument("--corpus", required=True)
    sp.set_defaults(func=cmd_eval)

    sp = sub.add_parser("sweep", help="latency/quality/calls trade-off over parameter grids")
    common(sp)
    sp.add_argument("--checkpoint", required=True, help=f"checkpoint path, or '{ORACLE}'")
    sp.add_argument("--corpus", required=True)
    policy_flags(sp, required=False)
    sp.set_defaults(func=cmd_sweep)
    return p


def main(argv=None) -> int:
    args = build_parser().parse_args(argv)
    logging.basicConfig(level=logging.INFO if args.verbose else logging.WARNING, format="%(levelname)s %(message)s")
    try:
        args.func(args)
    except ConfigError as exc:
        print(f"config error: {exc}", file=sys.stderr)
        return EXIT_CONFIG
    except DataError as exc:
        print(f"data error: {exc}", file=sys.stderr)
        return EXIT_DATA
    except (NumericError, TruncatedOutputError, FloatingPointError) as exc:
        print(f"numeric failure: {exc}", file=sys.stderr)
        return EXIT_NUMERIC
    return 0


if __name__ == "__main__":
    sys.exit(main())
