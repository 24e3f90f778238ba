"""Training loop, evaluation and the ablation protocol."""

from __future__ import annotations

import csv
import io
import logging
import os
from collections import defaultdict
from concurrent.futures import ProcessPoolExecutor
from dataclasses import dataclass, field
from typing import Callable, Iterable, Sequence

import numpy as np

from .config import ExperimentConfig, LossWeights, load_config_dict
from .data import MultimodalBatch, SyntheticDataset, dataset_for
from .errors import ConfigError, ContractError, DivergenceError
from .metrics import MetricsRecord, branch_metrics, primary_metric, select_best
from .model import CoTrainModel, build_model, forward_all
from .nn import init_params
from .objectives import KtProjectors, total_loss
from .optim import Adam
from .tensor import backward, no_grad

__all__ = [
    "TrainResult",
    "resolve_mode",
    "train",
    "evaluate",
    "AblationTable",
    "run_ablation",
    "ABLATION_VARIANTS",
    "ALPHA_SWEEP",
]

log = logging.getLogger(__name__)

ALPHA_SWEEP = (1.0, 5.0, 10.0, 20.0)
ABLATION_VARIANTS = ("no_kt", "frozen_shared", "frozen_shared_mm", "alpha_sweep")
EVAL_CHUNK = 512


def resolve_mode(cfg: ExperimentConfig) -> tuple[str, LossWeights, list[str]]:
    """Forward mode, effective loss weights and evaluated branches for ``cfg.mode``."""
    w = cfg.loss
    names = cfg.names
    if cfg.mode == "no_kt":
        return "cotrain", w.model_copy(update={"alpha": 0.0}), names + ["mm"]
    if cfg.mode == "mm_only":
        return "cotrain", w.model_copy(update={"alpha": 0.0, "beta": 0.0}), ["mm"]
    if cfg.mode == "no_mm":
        return "no_mm", w, names
    return cfg.mode, w, names + ["mm"]


@dataclass
class TrainResult:
    model: CoTrainModel
    records: list[MetricsRecord]
    selected: dict[str, int]
    snapshots: dict[str, dict[str, np.ndarray]] = field(repr=False)
    test: dict[str, dict[str, float]]
    initial_state: dict[str, np.ndarray] = field(repr=False)
    projectors: KtProjectors | None = None


def _predict(model: CoTrainModel, data: MultimodalBatch, mode: str, branches: Sequence[str]) -> dict[str, np.ndarray]:
    need_mm = "mm" in branches
    fwd = mode if need_mm else "no_mm"
    chunks: dict[str, list[np.ndarray]] = defaultdict(list)
    with no_grad():
        for start in range(0, len(data), EVAL_CHUNK):
            part = data.take(np.arange(start, min(start + EVAL_CHUNK, len(data))))
            out = forward_all(model, part, fwd)
            for b in branches:
                pred = out.mm_pred if b == "mm" else out.uni_pred[b]
                chunks[b].append(pred.data)
    return {b: np.concatenate(chunks[b]) for b in branches}


def evaluate(model: CoTrainModel, data: MultimodalBatch, task: str, mode: str = "cotrain",
             branches: Sequence[str] | None = None, epoch: int = 0, split: str = "val") -> MetricsRecord:
    """Accuracy per branch (classification) or MAE / correlation / acc_7 (regression)."""
    if len(data) == 0:
        raise ContractError("cannot evaluate an empty split")
    if branches is None:
        branches = list(model.modalities) + ([] if mode == "no_mm" else ["mm"])
    preds = _predict(model, data, mode, branches)
    return MetricsRecord(epoch, split, {b: branch_metrics(p, data.targets, task) for b, p in preds.items()})


def _check_finite(breakdown: dict[str, float], epoch: int) -> None:
    bad = [k for k, v in breakdown.items() if k != "total" and not np.isfinite(v)]
    if bad or not np.isfinite(breakdown.get("total", 0.0)):
        term = bad[0] if bad else "total"
        raise DivergenceError(f"non-finite loss in term {term!r} at epoch {epoch}: {breakdown}", term=term)


def train(cfg: ExperimentConfig, dataset: SyntheticDataset | None = None, seed: int | None = None,
          on_epoch: Callable[[list[MetricsRecord]], None] | None = None) -> TrainResult:
    """Optimise the combined loss with Adam; validate every epoch; select per branch."""
    seed = cfg.seed if seed is None else seed
    if dataset is None:
        dataset = dataset_for(cfg, seed if cfg.data.seed is None else cfg.data.seed)
    fwd, weights, branches = resolve_mode(cfg)
    task = cfg.task.kind
    model = build_model(cfg, seed)
    initial = model.state_dict()

    projectors = None
    params = model.parameters()
    if weights.kt_mode == "feature":
        widths = {m: b.feature_width for m, b in model.branches.items()}
        projectors = KtProjectors(widths, len(cfg.names) * cfg.multimodal.d_model)
        init_params(projectors, seed + 1)
        params = params + projectors.parameters()
    opt_cfg = cfg.optimizer
    opt = Adam(params, opt_cfg.lr, opt_cfg.beta1, opt_cfg.beta2, opt_cfg.eps)
    order_rng = np.random.default_rng([seed, 11])

    metric, higher = primary_metric(task)
    records: list[MetricsRecord] = []
    best: dict[str, float] = {}
    selected: dict[str, int] = {}
    snapshots: dict[str, dict[str, np.ndarray]] = {}

    for epoch in range(1, cfg.epochs + 1):
        sums: dict[str, float] = defaultdict(float)
        n_batches = 0
        for batch in dataset.batches("train", cfg.batch_size, order_rng):
            opt.zero_grad()
            out = forward_all(model, batch, fwd, weights.kt_through_stem)
            loss, breakdown = total_loss(out, batch.targets, weights, task=task, projectors=projectors)
            _check_finite(breakdown, epoch)
            backward(loss)
            opt.step()
            for k, v in breakdown.items():
                sums[k] += v
            n_batches += 1
        records.append(MetricsRecord(epoch, "train", {}, {k: v / n_batches for k, v in sums.items()}))
        val = evaluate(model, dataset.val, task, fwd, branches, epoch=epoch, split="val")
        records.append(val)
        for b in branches:
            v = val.value(b, metric)
            if b not in best or ((v > best[b]) if higher else (v < best[b])):
                best[b], selected[b] = v, epoch
                snapshots[b] = model.state_dict()
        log.debug("epoch %d loss %.4f val %s", epoch, sums["total"] / n_batches, val.metrics)
        if on_epoch is not None:
            on_epoch(records)

    for b in branches:
        assert select_best(records, b, task)[0] == selected[b]

    test: dict[str, dict[str, float]] = {}
    probe = build_model(cfg, seed)
    for b in branches:
        probe.load_state_dict(snapshots[b])
        test[b] = evaluate(probe, dataset.test, task, fwd, [b], split="test").metrics[b]
    return TrainResult(model, records, selected, snapshots, test, initial, projectors)


# ----------------------------------------------------------------------------
# ablations


@dataclass
class AblationTable:
    variant: str
    rows: list[dict] = field(default_factory=list)

    @property
    def columns(self) -> list[str]:
        cols: list[str] = []
        for row in self.rows:
            for k in row:
                if k not in cols:
                    cols.append(k)
        return cols

    def to_csv(self) -> str:
        buf = io.StringIO()
        writer = csv.DictWriter(buf, fieldnames=self.columns, lineterminator="\n")
        writer.writeheader()
        for row in self.rows:
            writer.writerow({k: (repr(v) if isinstance(v, float) else v) for k, v in row.items()})
        return buf.getvalue()


def _variant_runs(base: ExperimentConfig, variant: str) -> list[tuple[str, ExperimentConfig]]:
    if variant == "no_kt":
        return [("cotrain", base.with_updates(mode="cotrain")), ("no_kt", base.with_updates(mode="no_kt"))]
    if variant in ("frozen_shared", "frozen_shared_mm"):
        return [("cotrain", base.with_updates(mode="cotrain")),
                ("frozen_shared_mm", base.with_updates(mode="frozen_shared_mm"))]
    if variant == "alpha_sweep":
        return [(f"{a:g}", base.with_updates(mode="cotrain", loss={"alpha": a, "beta": 1.0, "gamma": 1.0}))
                for a in ALPHA_SWEEP]
    raise ConfigError(f"unknown ablation variant {variant!r}; expected one of {ABLATION_VARIANTS}")


def _run_one(job: tuple[dict, int]) -> dict[str, dict[str, float]]:
    cfg_dict, seed = job
    cfg = load_config_dict(cfg_dict)
    return train(cfg.with_updates(seed=seed)).test


def _workers() -> int:
    try:
        return max(1, int(os.environ.get("COMODAL_THREADS", "1")))
    except ValueError:
        return 1


def run_ablation(base: ExperimentConfig, variant: str, seeds: Iterable[int],
                 workers: int | None = None) -> AblationTable:
    """Matched runs differing only in ``variant``; one row per (value, seed) plus a mean row per value."""
    seeds = list(seeds)
    if not seeds:
        raise ContractError("run_ablation needs at least one seed")
    runs = _variant_runs(base, variant)
    jobs = [(cfg.model_dump(), s) for _, cfg in runs for s in seeds]
    workers = _workers() if workers is None else workers
    if workers > 1 and len(jobs) > 1:
        with ProcessPoolExecutor(max_workers=workers) as pool:
            results = list(pool.map(_run_one, jobs))
    else:
        results = [_run_one(job) for job in jobs]

    table = AblationTable("frozen_shared" if variant == "frozen_shared_mm" else variant)
    it = iter(results)
    for value, cfg in runs:
        fwd, w, _ = resolve_mode(cfg)
        per_seed = []
        for s in seeds:
            test = next(it)
            metrics = {f"{b}_{k}": v for b, ms in test.items() for k, v in ms.items()}
            row = {"variant": table.variant, "value": value, "seed": s, "mode": cfg.mode,
                   "alpha": w.alpha, "beta": w.beta, "gamma": w.gamma, **metrics}
            table.rows.append(row)
            per_seed.append(metrics)
        mean = {k: float(np.mean([m[k] for m in per_seed])) for k in per_seed[0]}
        table.rows.append({"variant": table.variant, "value": value, "seed": "mean", "mode": cfg.mode,
                           "alpha": w.alpha, "beta": w.beta, "gamma": w.gamma, **mean})
    return table
