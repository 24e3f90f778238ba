"""Central finite-difference checks for every operation, layer and loss.

Each case is a function of one leaf tensor that returns a scalar. Scalar
reductions use fixed random weights so no gradient component is trivially
zero, and inputs to kinked functions (relu, abs, clamp) are kept away from
the kink.
"""

from __future__ import annotations

import time
from dataclasses import dataclass
from typing import Callable, Iterable

import numpy as np

from . import tensor as T
from .config import ExperimentConfig, validate_config
from .data import MultimodalBatch
from .model import build_model, forward_all
from .nn import AttentionBlock, Conv1d, LayerNorm, Linear, Module, TransformerBlock, TransformerStack, init_params
from .objectives import (
    KtProjectors,
    kt_attention,
    kt_decision,
    kt_feature,
    task_loss_classification,
    task_loss_regression,
    total_loss,
)
from .tensor import Tensor

__all__ = ["TOLERANCE", "GradCase", "GradResult", "cases", "run_suite"]

TOLERANCE = 1e-5


@dataclass(frozen=True)
class GradCase:
    name: str
    group: str  # "op", "layer" or "loss"
    build: Callable[[np.random.Generator], tuple[Callable[[Tensor], Tensor], np.ndarray]]


@dataclass(frozen=True)
class GradResult:
    name: str
    group: str
    error: float
    passed: bool
    seconds: float


def _weights(rng: np.random.Generator, shape) -> Tensor:
    return Tensor(rng.uniform(0.5, 1.5, size=shape) * rng.choice([-1.0, 1.0], size=shape))


def _away_from_zero(rng: np.random.Generator, shape, margin: float = 0.1) -> np.ndarray:
    return rng.choice([-1.0, 1.0], size=shape) * (margin + rng.uniform(0.0, 1.0, size=shape))


def _weighted(fn: Callable[[Tensor], Tensor], out_shape, rng) -> Callable[[Tensor], Tensor]:
    w = _weights(rng, out_shape)
    return lambda x: (fn(x) * w).sum()


def _unary(name: str, fn, make_x=None) -> GradCase:
    def build(rng):
        x = make_x(rng) if make_x else rng.normal(size=(3, 4))
        with T.no_grad():
            shape = fn(Tensor(x)).shape
        return _weighted(fn, shape, rng), x
    return GradCase(name, "op", build)


def _binary(name: str, fn, shape_a, shape_b, make_b=None, wrt: str = "a") -> GradCase:
    def build(rng):
        a = rng.normal(size=shape_a)
        b = make_b(rng, shape_b) if make_b else rng.normal(size=shape_b)
        if wrt == "a":
            g = lambda x: fn(x, Tensor(b))
            x0 = a
        else:
            g = lambda x: fn(Tensor(a), x)
            x0 = b
        with T.no_grad():
            shape = g(Tensor(x0)).shape
        return _weighted(g, shape, rng), x0
    return GradCase(f"{name}[{wrt}]", "op", build)


def _param(module: Module, name: str, loss: Callable[[], Tensor]) -> tuple[Callable[[Tensor], Tensor], np.ndarray]:
    """Check ``loss`` as a function of one registered parameter of ``module``."""
    owner, attr = _owner_of(module, dict(module.named_parameters())[name])
    original = getattr(owner, attr)

    def f(x: Tensor) -> Tensor:
        setattr(owner, attr, x)
        try:
            return loss()
        finally:
            setattr(owner, attr, original)

    return f, original.data.copy()


def _owner_of(module: Module, target: Tensor) -> tuple[Module, str]:
    stack = [module]
    while stack:
        m = stack.pop()
        for pname in m._param_names:
            if getattr(m, pname) is target:
                return m, pname
        stack.extend(child for _, child in m._children())
    raise KeyError("parameter not found in module tree")


def _layer_cases() -> list[GradCase]:
    out: list[GradCase] = []

    def linear(rng):
        layer = init_params(Linear(4, 3), 1)
        layer.bias.data = rng.normal(size=3)
        x = rng.normal(size=(5, 4))
        w = _weights(rng, (5, 3))
        return layer, lambda inp: (layer(inp) * w).sum(), x

    def conv(rng):
        layer = init_params(Conv1d(3, 4, 3, stride=2, padding=1), 2)
        layer.bias.data = rng.normal(size=4)
        x = rng.normal(size=(2, 3, 7))
        w = _weights(rng, (2, 4, layer.out_length(7)))
        return layer, lambda inp: (layer(inp) * w).sum(), x

    def norm(rng):
        layer = init_params(LayerNorm(5), 3)
        layer.gain.data = rng.uniform(0.5, 1.5, size=5)
        layer.bias.data = rng.normal(size=5)
        x = rng.normal(size=(3, 5))
        w = _weights(rng, (3, 5))
        return layer, lambda inp: (layer(inp) * w).sum(), x

    def attention(rng):
        layer = init_params(AttentionBlock(4, heads=2), 4)
        x = rng.normal(size=(2, 3, 4))
        ctx = Tensor(rng.normal(size=(2, 5, 4)))
        w = _weights(rng, (2, 3, 4))
        return layer, lambda inp: (layer.attend(inp, ctx) * w).sum(), x

    def block(rng):
        layer = init_params(TransformerBlock(4, heads=1, ffn_mult=2, cross=True), 5)
        x = rng.normal(size=(2, 3, 4))
        ctx = Tensor(rng.normal(size=(2, 4, 4)))
        w = _weights(rng, (2, 3, 4))
        return layer, lambda inp: (layer(inp, ctx) * w).sum(), x

    def stack(rng):
        layer = init_params(TransformerStack(["a", "b"], 4, heads=1, cross_depth=1, self_depth=1, ffn_mult=1), 6)
        b = Tensor(rng.normal(size=(2, 4, 4)))
        x = rng.normal(size=(2, 3, 4))
        wa, wb = _weights(rng, (2, 3, 4)), _weights(rng, (2, 4, 4))

        def loss(inp):
            fused, _ = layer({"a": inp, "b": b})
            return (fused["a"] * wa).sum() + (fused["b"] * wb).sum()
        return layer, loss, x

    builders = {"linear": linear, "conv1d_layer": conv, "layer_norm": norm,
                "attention_block": attention, "transformer_block": block, "transformer_stack": stack}
    for lname, make in builders.items():
        def inp_case(rng, make=make):
            _, loss, x = make(rng)
            return loss, x
        out.append(GradCase(f"{lname}[input]", "layer", inp_case))
        probe_rng = np.random.default_rng(0)
        layer, _, _ = make(probe_rng)
        # one case per parameter; stacks are large so only a representative subset
        names = [n for n, _ in layer.named_parameters()]
        if lname == "transformer_stack":
            names = [n for n in names if n.endswith(("Wq", "Wv", "weight")) and ("a->b" in n or "fuse.a" in n)]
        for pname in names:
            def p_case(rng, make=make, pname=pname):
                layer, loss, x = make(rng)
                x_t = Tensor(x)
                return _param(layer, pname, lambda: loss(x_t))
            out.append(GradCase(f"{lname}[{pname}]", "layer", p_case))
    return out


def tiny_config(kt_mode: str = "decision", task: str = "classification", attention: bool = False) -> ExperimentConfig:
    """Small two-modality config used by gradient checks and tests."""
    tail = {"kind": "attention", "heads": 1, "ffn_mult": 1} if attention else {"kind": "conv1d", "channels": 4}
    return validate_config({
        "modalities": [
            {"name": "a", "input_shape": [3, 4], "layers": [{"kind": "conv1d", "channels": 4}, tail]},
            {"name": "b", "input_shape": [2, 4, 2, 2],
             "layers": [{"kind": "pointwise", "channels": 4, "activation": "tanh"},
                        {"kind": "pool_spatial"}, tail]},
        ],
        "multimodal": {"d_model": 4, "heads": 1, "ffn_mult": 1},
        "loss": {"alpha": 0.7, "beta": 1.3, "gamma": 0.9, "temperature": 2.0, "kt_mode": kt_mode},
        "task": {"kind": task, "num_classes": 3},
    })


def _total_loss_cases() -> list[GradCase]:
    out: list[GradCase] = []
    variants = [("decision", "classification", False), ("feature", "classification", False),
                ("attention", "classification", True), ("feature", "regression", False)]
    for kt_mode, task, attn in variants:
        cfg = tiny_config(kt_mode, task, attn)
        probe = build_model(cfg, 0)
        picks = {}
        for name, p in probe.named_parameters():
            part = probe.partition_of(name)
            if part not in picks or p.size < probe_size(probe, picks[part]):
                picks[part] = name
        if kt_mode == "feature":
            picks["projector"] = "maps.a.bias"
        for part, pname in picks.items():
            def build(rng, cfg=cfg, pname=pname, kt_mode=kt_mode, task=task):
                model = build_model(cfg, 7)
                for _, p in model.named_parameters():
                    p.data = p.data + 0.05 * rng.normal(size=p.shape)
                proj = None
                if kt_mode == "feature":
                    proj = init_params(KtProjectors({m: b.feature_width for m, b in model.branches.items()},
                                                    2 * cfg.multimodal.d_model), 8)
                inputs = {"a": rng.normal(size=(3, 3, 4)), "b": rng.normal(size=(3, 2, 4, 2, 2))}
                targets = rng.integers(0, 3, size=3) if task == "classification" else rng.normal(size=3)
                batch = MultimodalBatch(inputs, targets)

                # the teacher is a stop-gradient: finite differences must hold it fixed
                with T.no_grad():
                    frozen = forward_all(model, batch, "cotrain")

                def loss():
                    out = forward_all(model, batch, "cotrain")
                    return total_loss(out, targets, cfg.loss, task=task, projectors=proj, teacher=frozen)[0]
                owner = proj if pname.startswith("maps.") else model
                return _param(owner, pname, loss)
            out.append(GradCase(f"total_loss[{kt_mode},{task}][{pname}]", "loss", build))
    return out


def probe_size(model: Module, name: str) -> int:
    return dict(model.named_parameters())[name].size


def _loss_cases() -> list[GradCase]:
    def decision(rng):
        teacher = Tensor(rng.normal(size=(4, 5)))
        return (lambda s: kt_decision(s, teacher, 3.0)), rng.normal(size=(4, 5))

    def feature(rng):
        teacher = Tensor(rng.normal(size=(4, 6)))
        return (lambda s: kt_feature(s, teacher)), rng.normal(size=(4, 6))

    def feature_proj(rng):
        proj = init_params(Linear(3, 6), 1)
        teacher = Tensor(rng.normal(size=(4, 6)))
        return (lambda s: kt_feature(s, teacher, proj)), rng.normal(size=(4, 3))

    def attention(rng):
        teacher = T.softmax_t(Tensor(rng.normal(size=(2, 1, 3, 3))), axis=-1)
        return (lambda z: kt_attention(T.softmax_t(z, axis=-1), teacher)), rng.normal(size=(2, 1, 3, 3))

    def ce(rng):
        labels = rng.integers(0, 4, size=5)
        return (lambda z: task_loss_classification(z, labels)), rng.normal(size=(5, 4))

    def mae_case(rng):
        target = rng.normal(size=6)
        pred = target.reshape(6, 1) + _away_from_zero(rng, (6, 1))
        return (lambda p: task_loss_regression(p, target)), pred

    return [GradCase("kt_decision", "loss", decision), GradCase("kt_feature", "loss", feature),
            GradCase("kt_feature[projected]", "loss", feature_proj), GradCase("kt_attention", "loss", attention),
            GradCase("task_loss_classification", "loss", ce), GradCase("task_loss_regression", "loss", mae_case)]


def _op_cases() -> list[GradCase]:
    pos = lambda rng: rng.uniform(0.5, 2.0, size=(3, 4))
    nonzero = lambda rng, shape: _away_from_zero(rng, shape, 0.5)
    out = [
        _binary("add", lambda a, b: a + b, (3, 4), (3, 4)),
        _binary("add", lambda a, b: a + b, (3, 4), (4,), wrt="b"),
        _binary("add", lambda a, b: a + b, (3, 4), (), wrt="b"),
        _binary("sub", lambda a, b: a - b, (3, 4), (3, 4)),
        _binary("sub", lambda a, b: a - b, (3, 4), (3, 4), wrt="b"),
        _binary("mul", lambda a, b: a * b, (3, 4), (3, 4)),
        _binary("mul", lambda a, b: a * b, (3, 4), (4,), wrt="b"),
        _binary("div", lambda a, b: a / b, (3, 4), (3, 4), make_b=nonzero),
        _binary("div", lambda a, b: a / b, (3, 4), (3, 4), make_b=nonzero, wrt="b"),
        _binary("matmul", T.matmul, (3, 4), (4, 2)),
        _binary("matmul", T.matmul, (3, 4), (4, 2), wrt="b"),
        _binary("matmul_batched", T.matmul, (2, 3, 4), (2, 4, 5)),
        _binary("matmul_batched", T.matmul, (2, 3, 4), (4, 5), wrt="b"),
        _unary("neg", lambda x: -x),
        _unary("pow", lambda x: x ** 3.0),
        _unary("pow_fractional", lambda x: x ** 1.5, pos),
        _unary("exp", lambda x: x.exp()),
        _unary("log", lambda x: x.log(), pos),
        _unary("sqrt", lambda x: x.sqrt(), pos),
        _unary("tanh", lambda x: x.tanh()),
        _unary("relu", lambda x: x.relu(), lambda rng: _away_from_zero(rng, (3, 4))),
        _unary("abs", lambda x: x.abs(), lambda rng: _away_from_zero(rng, (3, 4))),
        _unary("clamp_min", lambda x: T.clamp_min(x, 0.2),
               lambda rng: 0.2 + _away_from_zero(rng, (3, 4))),
        _unary("reshape", lambda x: x.reshape(2, 6)),
        _unary("transpose", lambda x: x.transpose(1, 0)),
        _unary("transpose_3d", lambda x: x.transpose(2, 0, 1), lambda rng: rng.normal(size=(2, 3, 4))),
        _unary("swapaxes", lambda x: x.swapaxes(0, 2), lambda rng: rng.normal(size=(2, 3, 4))),
        _unary("sum_all", lambda x: x.sum()),
        _unary("sum_axis", lambda x: x.sum(axis=0)),
        _unary("mean_all", lambda x: x.mean()),
        _unary("mean_axis_keepdims", lambda x: x.mean(axis=1, keepdims=True)),
        _unary("mean_pool", lambda x: T.mean_pool(x, (2, 3)), lambda rng: rng.normal(size=(2, 3, 2, 2))),
        _unary("concat", lambda x: T.concat([x, x * 2.0, x.exp()], axis=1)),
        _unary("softmax_t", lambda x: T.softmax_t(x, axis=-1, temperature=1.0)),
        _unary("softmax_t[T=3]", lambda x: T.softmax_t(x, axis=0, temperature=3.0)),
        _unary("log_softmax_t[T=2]", lambda x: T.log_softmax_t(x, axis=-1, temperature=2.0)),
    ]

    def conv_case(which: str, stride: int, padding: int) -> GradCase:
        def build(rng):
            x = rng.normal(size=(2, 3, 7))
            w = rng.normal(size=(4, 3, 3))
            b = rng.normal(size=4)
            args = {"x": x, "weight": w, "bias": b}

            def g(t):
                vals = {k: (t if k == which else Tensor(v)) for k, v in args.items()}
                return T.conv1d(vals["x"], vals["weight"], vals["bias"], stride, padding)
            with T.no_grad():
                shape = g(Tensor(args[which])).shape
            return _weighted(g, shape, rng), args[which]
        return GradCase(f"conv1d[{which},s={stride},p={padding}]", "op", build)

    for which in ("x", "weight", "bias"):
        out.append(conv_case(which, 1, 0))
        out.append(conv_case(which, 2, 1))
    return out


def cases() -> list[GradCase]:
    return _op_cases() + _layer_cases() + _loss_cases() + _total_loss_cases()


def run_suite(selected: Iterable[str] | None = None, seed: int = 0,
              tolerance: float = TOLERANCE) -> list[GradResult]:
    """Run the selected cases (all by default); ``selected`` entries match names or groups."""
    chosen = cases()
    if selected is not None:
        keys = set(selected)
        if "all" not in keys:
            chosen = [c for c in chosen if c.group in keys or c.name in keys or c.name.split("[")[0] in keys]
    results = []
    for i, case in enumerate(chosen):
        rng = np.random.default_rng([seed, i])
        start = time.perf_counter()
        f, x0 = case.build(rng)
        err = T.finite_diff_check(f, Tensor(x0))
        results.append(GradResult(case.name, case.group, err, bool(err < tolerance), time.perf_counter() - start))
    return results
