"""``sctd`` command line: pretrain, drift, probe, flops and a toy corpus generator.

Exit codes: 0 success, 1 configuration or input error, 2 training aborted on a
non-finite value, 3 file-system or checkpoint error.
"""

from __future__ import annotations

import argparse
import contextlib
import datetime as _dt
import glob
import json
import logging
import os
import re
import subprocess
import sys
from pathlib import Path
from typing import List, Optional, Sequence

from . import __version__
from .config import MODES, TrainConfig
from .errors import (ConfigError, IncompatibleCheckpointError, InputError, IntegrityError,
                     NonFiniteLossError)

EXIT_OK, EXIT_CONFIG, EXIT_ABORT, EXIT_IO = 0, 1, 2, 3


class _Parser(argparse.ArgumentParser):
    """argparse exits with 2 on usage errors; here 2 means a training abort."""

    def error(self, message):
        self.print_usage(sys.stderr)
        self.exit(EXIT_CONFIG, f"{self.prog}: error: {message}\n")


def _keep(value: str) -> float:
    v = float(value)
    if not 0.0 < v <= 1.0:
        raise argparse.ArgumentTypeError("must lie in (0, 1]")
    return v


def _rate(value: str) -> float:
    v = float(value)
    if not 0.0 <= v <= 1.0:
        raise argparse.ArgumentTypeError("must lie in [0, 1]")
    return v


def _layer(value: str):
    if value == "all":
        return value
    try:
        v = int(value)
    except ValueError:
        raise argparse.ArgumentTypeError("expected an integer or 'all'") from None
    if v < 0:
        raise argparse.ArgumentTypeError("layer must be >= 0")
    return v


def build_parser() -> argparse.ArgumentParser:
    p = _Parser(prog="sctd", description="Token-dropping MLM pretraining with semantic-consistency losses.",
                allow_abbrev=False)
    p.add_argument("--version", action="version", version=f"sctd {__version__}")
    p.add_argument("-v", "--verbose", action="store_true", help="log validation losses to stderr")
    sub = p.add_subparsers(dest="command", required=True, parser_class=_Parser)

    s = sub.add_parser("pretrain", help="train an encoder", allow_abbrev=False)
    s.add_argument("--config", type=Path, help="JSON run configuration (defaults used when omitted)")
    s.add_argument("--mode", choices=MODES, help="training mode (overrides schedule.mode)")
    s.add_argument("--steps", type=int, help="total optimizer steps (overrides optimizer.total_steps)")
    s.add_argument("--seed", type=int, help="run seed (overrides optimizer.seed)")
    s.add_argument("--corpus", type=Path, help="training text, one sentence per line (overrides data.corpus)")
    s.add_argument("--checkpoint-every", type=int, help="save every K steps (overrides run.checkpoint_every)")
    s.add_argument("--out", type=Path, required=True, help="output directory")
    s.add_argument("--resume", type=Path, help="checkpoint to continue from")
    s.add_argument("--stop-after", type=int, help="stop once this step is done (for staged runs)")
    s.set_defaults(func=cmd_pretrain)

    s = sub.add_parser("drift", help="semantic drift of frozen checkpoints under corruption",
                       allow_abbrev=False)
    s.add_argument("--checkpoints", required=True, help="glob of checkpoint files")
    s.add_argument("--eval", type=Path, required=True, help="sentences, one per line")
    s.add_argument("--corruption", choices=("mask", "drop"), required=True)
    s.add_argument("--rate", type=_rate, required=True)
    s.add_argument("--seed", type=int, default=0)
    s.add_argument("--out", type=Path, help="JSONL output (stdout when omitted)")
    s.set_defaults(func=cmd_drift)

    s = sub.add_parser("probe", help="linear probes on per-layer sentence representations",
                       allow_abbrev=False)
    s.add_argument("--checkpoint", type=Path, required=True)
    s.add_argument("--task", type=Path, required=True, help="label<TAB>sentence lines")
    s.add_argument("--layer", type=_layer, default="all", help="hidden-state index or 'all'")
    s.add_argument("--epochs", type=int, default=200)
    s.add_argument("--seed", type=int, default=0)
    s.add_argument("--out", type=Path, help="JSONL output (stdout when omitted)")
    s.set_defaults(func=cmd_probe)

    s = sub.add_parser("flops", help="analytic MAC count of full vs token-drop forward",
                       allow_abbrev=False)
    s.add_argument("--config", type=Path)
    s.add_argument("--keep", type=_keep, help="keep ratio (overrides model.keep_ratio)")
    s.add_argument("--seq-len", type=int, help="sequence length (default: model.max_seq)")
    s.add_argument("--vocab-size", type=int, help="vocabulary size (default: data.vocab_size)")
    s.add_argument("--json", action="store_true", help="print the full report as JSON")
    s.set_defaults(func=cmd_flops)

    s = sub.add_parser("corpus", help="write the seeded toy corpus or a probing task", allow_abbrev=False)
    s.add_argument("--out", type=Path, required=True)
    s.add_argument("--n", type=int, default=20000)
    s.add_argument("--seed", type=int, default=0)
    s.add_argument("--probe", choices=("tense", "number"), help="write a labelled probing task instead")
    s.set_defaults(func=cmd_corpus)
    return p


# ---------------------------------------------------------------------------
# helpers
# ---------------------------------------------------------------------------


def _load_config(path: Optional[Path]) -> TrainConfig:
    if path is None:
        return TrainConfig()
    if not path.is_file():
        raise ConfigError(f"config file not found: {path}")
    return TrainConfig.load(path)


@contextlib.contextmanager
def _thread_cap():
    raw = os.environ.get("SCTD_THREADS")
    if not raw:
        yield
        return
    try:
        n = int(raw)
    except ValueError:
        raise ConfigError(f"SCTD_THREADS must be a positive integer, got {raw!r}") from None
    if n < 1:
        raise ConfigError(f"SCTD_THREADS must be a positive integer, got {raw!r}")
    from threadpoolctl import threadpool_limits

    with threadpool_limits(limits=n):
        yield


def _git_stamp() -> Optional[str]:
    try:
        res = subprocess.run(["git", "describe", "--always", "--dirty"], capture_output=True, text=True,
                             cwd=Path(__file__).resolve().parent, timeout=5)
    except (OSError, subprocess.SubprocessError):
        return None
    if res.returncode != 0:
        return None
    return res.stdout.strip() or None


def _write_lines(lines: Sequence[str], out: Optional[Path]):
    text = "".join(line + "\n" for line in lines)
    if out is None:
        sys.stdout.write(text)
    else:
        out.write_text(text, encoding="utf-8")


def _step_of(path: str) -> tuple:
    m = re.search(r"(\d+)(?=\D*$)", Path(path).name)
    return (int(m.group(1)) if m else float("inf"), path)


# ---------------------------------------------------------------------------
# commands
# ---------------------------------------------------------------------------


def cmd_pretrain(args) -> int:
    from .trainer import train

    config = _load_config(args.config)
    overrides = {"schedule": {}, "optimizer": {}, "data": {}, "run": {}}
    if args.mode:
        overrides["schedule"]["mode"] = args.mode
    if args.steps is not None:
        overrides["optimizer"]["total_steps"] = args.steps
    if args.seed is not None:
        overrides["optimizer"]["seed"] = args.seed
    if args.corpus is not None:
        overrides["data"]["corpus"] = str(args.corpus)
    if args.checkpoint_every is not None:
        overrides["run"]["checkpoint_every"] = args.checkpoint_every
    config = config.replace(**overrides)

    out: Path = args.out
    out.mkdir(parents=True, exist_ok=True)
    manifest = out / "manifest.json"
    if args.resume is None or not manifest.exists():
        manifest.write_text(json.dumps({
            "config": config.to_dict(),
            "config_fingerprint": config.fingerprint(),
            "version": __version__,
            "git": _git_stamp(),
            "seed": config.optimizer.seed,
            "started": _dt.datetime.now(_dt.timezone.utc).isoformat(timespec="seconds"),
            "layout": {"metrics": "metrics.jsonl", "validation": "validation.jsonl",
                       "checkpoints": "ckpt_<t>.sctd", "final": "final.sctd",
                       "abort": "abort_dump.json"},
        }, indent=2, sort_keys=True) + "\n", encoding="utf-8")
    elif json.loads(manifest.read_text(encoding="utf-8")).get("config_fingerprint") != config.fingerprint():
        raise ConfigError(f"{manifest}: existing run used a different configuration")

    result = train(config, out_dir=out, resume=args.resume, stop_at=args.stop_after)
    t = result.trainer.t
    last_val = result.validation[-1]["val_mlm"] if result.validation else None
    print(f"done: t={t}" + ("" if last_val is None else f" val_mlm={last_val:.4f}") + f" out={out}")
    return EXIT_OK


def cmd_drift(args) -> int:
    from .analysis import drift_curve
    from .data import read_corpus

    paths = sorted(glob.glob(args.checkpoints), key=_step_of)
    if not paths:
        raise InputError(f"no checkpoints match {args.checkpoints!r}")
    sentences = read_corpus(args.eval)
    reports = drift_curve(paths, sentences, args.corruption, args.rate, seed=args.seed)
    _write_lines([r.to_json() for r in reports], args.out)
    return EXIT_OK


def cmd_probe(args) -> int:
    from .analysis import probe_layers
    from .checkpoint import load_encoder
    from .corpus import read_probe_task
    from .data import encode

    encoder, vocab = load_encoder(args.checkpoint)
    sentences, labels = read_probe_task(args.task)
    if not sentences:
        raise InputError(f"{args.task}: no examples")
    l = encoder.config.n_layers
    if args.layer != "all" and args.layer > l:
        raise ConfigError(f"--layer {args.layer} exceeds the checkpoint's {l} layers")
    rows = [encode(s, vocab, encoder.config.max_seq, pad=False) for s in sentences]
    layers = None if args.layer == "all" else [args.layer]
    report = probe_layers(encoder, rows, labels, layers=layers, epochs=args.epochs, seed=args.seed)
    _write_lines(report.to_jsonl(), args.out)
    return EXIT_OK


def cmd_flops(args) -> int:
    from .analysis import flop_count
    from .model import ModelConfig

    config = _load_config(args.config)
    m = config.model
    mc = ModelConfig(vocab_size=args.vocab_size or config.data.vocab_size, n_layers=m.n_layers,
                     d_model=m.d_model, n_heads=m.n_heads, ffn_dim=m.ffn_dim, max_seq=m.max_seq,
                     drop_start=m.drop_start, drop_end=m.drop_end, keep_ratio=m.keep_ratio)
    report = flop_count(mc, keep_ratio=args.keep, seq_len=args.seq_len, mask_rate=config.data.mask_rate)
    print(json.dumps(report.to_dict(), indent=2) if args.json else report.table())
    return EXIT_OK


def cmd_corpus(args) -> int:
    from .corpus import write_corpus, write_probe_task

    if args.n < 1:
        raise ConfigError("--n must be positive")
    if args.probe:
        write_probe_task(args.out, args.n, args.probe, args.seed)
    else:
        write_corpus(args.out, args.n, args.seed)
    return EXIT_OK


def main(argv: Optional[List[str]] = None) -> int:
    args = build_parser().parse_args(argv)
    logging.basicConfig(level=logging.INFO if args.verbose else logging.WARNING,
                        format="%(name)s: %(message)s")
    try:
        with _thread_cap():
            return args.func(args)
    except NonFiniteLossError as exc:
        print(f"sctd: aborted: {exc}", file=sys.stderr)
        return EXIT_ABORT
    except (IntegrityError, IncompatibleCheckpointError, OSError) as exc:
        print(f"sctd: I/O error: {exc}", file=sys.stderr)
        return EXIT_IO
    except (ConfigError, InputError, ValueError) as exc:
        print(f"sctd: error: {exc}", file=sys.stderr)
        return EXIT_CONFIG


if __name__ == "__main__":
    sys.exit(main())
