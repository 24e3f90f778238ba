"""Command-line entry point: ``comodal {train,eval,extract,ablate,gradcheck,config-ref}``."""

from __future__ import annotations

import argparse
import logging
import sys
from pathlib import Path
from typing import Sequence

from . import checkpoint
from .config import ExperimentConfig, config_reference, parse_config
from .data import dataset_for
from .errors import ComodalError, ContractError, ModalityLookupError
from .metrics import MetricsRecord
from .model import build_model
from .records import dumps, metric_lines, run_id, write_jsonl
from .trainer import evaluate, resolve_mode, run_ablation, train

log = logging.getLogger("comodal")

METRICS_FILE = "metrics.jsonl"


def _cmd_train(args: argparse.Namespace) -> int:
    cfg = parse_config(args.config)
    seed = cfg.seed if args.seed is None else args.seed
    cfg = cfg.with_updates(seed=seed)
    out = Path(args.out)
    result = train(cfg)
    rid = run_id(cfg, seed)
    tests = [MetricsRecord(result.selected[b], "test", {b: m}) for b, m in result.test.items()]
    write_jsonl(metric_lines(result.records + tests, rid), out / METRICS_FILE)
    for branch, state in result.snapshots.items():
        checkpoint.save(state, out / f"best_{branch}.cmkt")
    checkpoint.save(result.model.state_dict(), out / "last.cmkt")
    for branch, epoch in result.selected.items():
        print(f"{branch}: epoch {epoch} test {dumps(result.test[branch])}")
    print(f"run_id {rid}; wrote {out / METRICS_FILE}")
    return 0


def _present_branches(cfg: ExperimentConfig, names: set[str]) -> list[str]:
    model = build_model(cfg, 0)
    parts = model.partitions()
    have = {key for key, params in parts.items() if params and set(params) <= names}
    branches = [m for m in cfg.names if all(f"{p}:{m}" in have or not parts[f"{p}:{m}"]
                                            for p in ("stem", "tail", "head"))]
    if "mm" in have and len(branches) == len(cfg.names):
        branches.append("mm")
    return branches


def _cmd_eval(args: argparse.Namespace) -> int:
    cfg = parse_config(args.config)
    seed = cfg.seed if args.seed is None else args.seed
    state = checkpoint.load(args.checkpoint)
    branches = _present_branches(cfg, set(state))
    if not branches:
        raise ContractError(f"checkpoint {args.checkpoint} holds no complete branch for this config")
    model = build_model(cfg, seed)
    model.load_state_dict(state, strict=False)
    data = dataset_for(cfg, seed if cfg.data.seed is None else cfg.data.seed)
    fwd, _, _ = resolve_mode(cfg)
    fwd = "cotrain" if fwd == "no_mm" and "mm" in branches else fwd
    rec = evaluate(model, data.split(args.split), cfg.task.kind, fwd, branches, split=args.split)
    for line in metric_lines([rec], run_id(cfg, seed)):
        print(dumps(line))
    return 0


def _cmd_extract(args: argparse.Namespace) -> int:
    state = checkpoint.load(args.checkpoint)
    prefix = f"{args.modality}."
    kept = {k: v for k, v in state.items() if k.startswith(prefix)}
    if not kept:
        found = sorted({k.split(".", 1)[0] for k in state} - {"mm"})
        raise ModalityLookupError(f"no parameters for modality {args.modality!r}; checkpoint has {found}")
    checkpoint.save(kept, args.out)
    print(f"wrote {len(kept)} tensors to {args.out}")
    return 0


def _cmd_ablate(args: argparse.Namespace) -> int:
    cfg = parse_config(args.config)
    if args.seeds < 1:
        raise ContractError("--seeds must be at least 1")
    seeds = range(cfg.seed, cfg.seed + args.seeds)
    table = run_ablation(cfg, args.variant, seeds)
    out = Path(args.out)
    out.mkdir(parents=True, exist_ok=True)
    path = out / f"ablation_{table.variant}.csv"
    path.write_text(table.to_csv())
    print(f"wrote {len(table.rows)} rows to {path}")
    return 0


def _cmd_gradcheck(args: argparse.Namespace) -> int:
    from .gradcheck import TOLERANCE, run_suite

    results = run_suite(args.ops)
    if not results:
        raise ContractError(f"no gradient checks match {args.ops}")
    failed = 0
    for r in results:
        status = "ok" if r.passed else "FAIL"
        failed += not r.passed
        print(f"{status:4} {r.group:5} {r.name:60} rel_err={r.error:.3e}")
    print(f"{len(results) - failed}/{len(results)} passed (tolerance {TOLERANCE:g})")
    if failed:
        print(f"gradient: {failed} finite-difference checks failed", file=sys.stderr)
        return 1
    return 0


def _cmd_config_ref(args: argparse.Namespace) -> int:
    print(config_reference())
    return 0


def build_parser() -> argparse.ArgumentParser:
    parser = argparse.ArgumentParser(prog="comodal", description="Multimodal co-training with knowledge transfer.")
    parser.add_argument("-v", "--verbose", action="store_true", help="debug logging")
    sub = parser.add_subparsers(dest="command", required=True)

    p = sub.add_parser("train", help="train and write metrics.jsonl plus selected checkpoints")
    p.add_argument("--config", required=True)
    p.add_argument("--out", required=True)
    p.add_argument("--seed", type=int, default=None)
    p.set_defaults(func=_cmd_train)

    p = sub.add_parser("eval", help="evaluate a checkpoint on one split")
    p.add_argument("--checkpoint", required=True)
    p.add_argument("--config", required=True)
    p.add_argument("--split", choices=("train", "val", "test"), default="test")
    p.add_argument("--seed", type=int, default=None, help="data seed (defaults to the config seed)")
    p.set_defaults(func=_cmd_eval)

    p = sub.add_parser("extract", help="write a standalone unimodal checkpoint")
    p.add_argument("--checkpoint", required=True)
    p.add_argument("--modality", required=True)
    p.add_argument("--out", required=True)
    p.set_defaults(func=_cmd_extract)

    p = sub.add_parser("ablate", help="matched ablation runs, written as CSV")
    p.add_argument("--config", required=True)
    p.add_argument("--variant", required=True, choices=("no_kt", "frozen_shared", "alpha_sweep"))
    p.add_argument("--seeds", type=int, default=3)
    p.add_argument("--out", required=True)
    p.set_defaults(func=_cmd_ablate)

    p = sub.add_parser("gradcheck", help="finite-difference gradient suite")
    p.add_argument("--ops", nargs="*", default=["all"], help="case names or groups (op, layer, loss); default all")
    p.set_defaults(func=_cmd_gradcheck)

    p = sub.add_parser("config-ref", help="print the configuration reference table")
    p.set_defaults(func=_cmd_config_ref)
    return parser


def main(argv: Sequence[str] | None = None) -> int:
    args = build_parser().parse_args(argv)
    logging.basicConfig(level=logging.DEBUG if args.verbose else logging.WARNING,
                        format="%(levelname)s %(name)s: %(message)s")
    try:
        return args.func(args)
    except ComodalError as err:
        print(f"{err.category}: {err}", file=sys.stderr)
    except FileNotFoundError as err:
        print(f"io: {err}", file=sys.stderr)
    except OSError as err:
        print(f"io: {err}", file=sys.stderr)
    return 2


if __name__ == "__main__":
    sys.exit(main())
