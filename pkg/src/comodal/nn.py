"""Parameterised building blocks: linear, conv1d, layer norm, attention, transformer stacks."""

from __future__ import annotations

import math
from typing import Iterator, Mapping, Sequence

import numpy as np

from . import tensor as T
from .errors import ContractError, ShapeError
from .tensor import Tensor

__all__ = [
    "Module",
    "Linear",
    "Conv1d",
    "LayerNorm",
    "AttentionBlock",
    "TransformerBlock",
    "TransformerStack",
    "cross_attention",
    "self_attention",
    "sinusoidal_positions",
    "init_params",
]


class Module:
    """Parameter container.

    Parameters are registered with :meth:`add_param`; child modules are found
    among attributes (directly, or inside lists and dicts) in assignment order,
    which fixes the parameter order used for initialisation and checkpoints.
    """

    def __init__(self) -> None:
        self._param_names: list[str] = []
        self._init_specs: dict[str, tuple] = {}

    def add_param(self, name: str, shape: Sequence[int], init: str = "glorot",
                  fan_in: int = 0, fan_out: int = 0) -> Tensor:
        p = Tensor(np.zeros(tuple(shape)), requires_grad=True, name=name)
        setattr(self, name, p)
        self._param_names.append(name)
        self._init_specs[name] = (init, fan_in, fan_out)
        return p

    def _children(self) -> Iterator[tuple[str, "Module"]]:
        def walk(key, value):
            if isinstance(value, Module):
                yield key, value
            elif isinstance(value, (list, tuple)):
                for i, child in enumerate(value):
                    yield from walk(f"{key}.{i}", child)
            elif isinstance(value, dict):
                for k, child in value.items():
                    yield from walk(f"{key}.{k}", child)

        for key, value in vars(self).items():
            if not key.startswith("_"):
                yield from walk(key, value)

    def named_parameters(self, prefix: str = "") -> Iterator[tuple[str, Tensor]]:
        dot = f"{prefix}." if prefix else ""
        for name in self._param_names:
            yield dot + name, getattr(self, name)
        for key, child in self._children():
            yield from child.named_parameters(dot + key)

    def named_init_specs(self, prefix: str = "") -> Iterator[tuple[str, Tensor, tuple]]:
        dot = f"{prefix}." if prefix else ""
        for name in self._param_names:
            yield dot + name, getattr(self, name), self._init_specs[name]
        for key, child in self._children():
            yield from child.named_init_specs(dot + key)

    def parameters(self) -> list[Tensor]:
        return [p for _, p in self.named_parameters()]

    def num_parameters(self) -> int:
        return sum(p.size for p in self.parameters())

    def zero_grad(self) -> None:
        for p in self.parameters():
            p.grad = None

    def state_dict(self) -> dict[str, np.ndarray]:
        return {name: p.data.copy() for name, p in self.named_parameters()}

    def load_state_dict(self, state: Mapping[str, np.ndarray], strict: bool = True) -> None:
        own = dict(self.named_parameters())
        if strict:
            missing = sorted(set(own) - set(state))
            extra = sorted(set(state) - set(own))
            if missing or extra:
                raise ContractError(f"state mismatch: missing={missing[:5]} unexpected={extra[:5]}")
        for name, value in state.items():
            if name not in own:
                continue
            value = np.asarray(value, dtype=np.float64)
            if value.shape != own[name].shape:
                raise ShapeError(f"{name}: expected shape {own[name].shape}, got {value.shape}")
            own[name].data = value.copy()


def init_params(module: Module, seed: int) -> Module:
    """Glorot-uniform weights, zero biases, unit norm gains; fully determined by ``seed``."""
    rng = np.random.default_rng(seed)
    for _, p, (kind, fan_in, fan_out) in module.named_init_specs():
        if kind == "glorot":
            a = math.sqrt(6.0 / (fan_in + fan_out))
            p.data = rng.uniform(-a, a, size=p.shape)
        elif kind == "ones":
            p.data = np.ones(p.shape)
        else:
            p.data = np.zeros(p.shape)
        p.grad = None
    return module


class Linear(Module):
    def __init__(self, d_in: int, d_out: int, bias: bool = True) -> None:
        super().__init__()
        self.d_in, self.d_out = d_in, d_out
        self.add_param("weight", (d_in, d_out), "glorot", d_in, d_out)
        self.has_bias = bias
        if bias:
            self.add_param("bias", (d_out,), "zeros")

    def __call__(self, x: Tensor) -> Tensor:
        if x.shape[-1] != self.d_in:
            raise ShapeError(f"linear expects width {self.d_in}, got input {x.shape}")
        y = x @ self.weight
        return y + self.bias if self.has_bias else y


class Conv1d(Module):
    def __init__(self, c_in: int, c_out: int, kernel: int, stride: int = 1, padding: int = 0) -> None:
        super().__init__()
        self.c_in, self.c_out, self.kernel = c_in, c_out, kernel
        self.stride, self.padding = stride, padding
        self.add_param("kernels", (c_out, c_in, kernel), "glorot", c_in * kernel, c_out * kernel)
        self.add_param("bias", (c_out,), "zeros")

    def out_length(self, length: int) -> int:
        return (length + 2 * self.padding - self.kernel) // self.stride + 1

    def __call__(self, x: Tensor) -> Tensor:
        return T.conv1d(x, self.kernels, self.bias, self.stride, self.padding)


class LayerNorm(Module):
    def __init__(self, d: int, eps: float = 1e-5) -> None:
        super().__init__()
        self.eps = eps
        self.add_param("gain", (d,), "ones")
        self.add_param("bias", (d,), "zeros")

    def __call__(self, x: Tensor) -> Tensor:
        centred = x - x.mean(axis=-1, keepdims=True)
        var = (centred * centred).mean(axis=-1, keepdims=True)
        return centred / (var + self.eps).sqrt() * self.gain + self.bias


class AttentionBlock(Module):
    """Scaled dot-product attention with query/key/value and output projections.

    Queries come from the first input, keys and values from the second; the
    two coincide for self-attention. Scores are scaled by sqrt(d / heads).
    """

    def __init__(self, d: int, heads: int = 1, expose_probs: bool = False) -> None:
        super().__init__()
        if heads < 1 or d % heads:
            raise ShapeError(f"width {d} is not divisible by {heads} heads")
        self.d, self.heads, self.expose_probs = d, heads, expose_probs
        for name in ("Wq", "Wk", "Wv", "Wo"):
            self.add_param(name, (d, d), "glorot", d, d)
        self._last_probs: Tensor | None = None

    @property
    def last_probs(self) -> Tensor | None:
        """Softmax probabilities [B, heads, T_q, T_kv] of the last forward (if exposed)."""
        return self._last_probs

    def _split(self, x: Tensor) -> Tensor:
        b, t, _ = x.shape
        return x.reshape(b, t, self.heads, self.d // self.heads).transpose(0, 2, 1, 3)

    def attend(self, queries: Tensor, keys: Tensor) -> Tensor:
        if queries.shape[-1] != self.d or keys.shape[-1] != self.d:
            raise ShapeError(f"attention width {self.d} vs inputs {queries.shape} and {keys.shape}")
        unbatched = queries.ndim == 2
        if unbatched:
            queries = queries.reshape(1, *queries.shape)
            keys = keys.reshape(1, *keys.shape)
        b, t_q, _ = queries.shape
        q = self._split(queries @ self.Wq)
        k = self._split(keys @ self.Wk)
        v = self._split(keys @ self.Wv)
        scale = 1.0 / math.sqrt(self.d // self.heads)
        probs = T.softmax_t(q @ k.swapaxes(-1, -2) * scale, axis=-1, temperature=1.0)
        self._last_probs = probs if self.expose_probs else None
        mixed = (probs @ v).transpose(0, 2, 1, 3).reshape(b, t_q, self.d)
        out = mixed @ self.Wo
        return out.reshape(t_q, self.d) if unbatched else out


def cross_attention(phi_a: Tensor, phi_b: Tensor, block: AttentionBlock) -> Tensor:
    """Fuse ``phi_b`` into ``phi_a``: queries from A, keys and values from B."""
    return block.attend(phi_a, phi_b)


def self_attention(phi: Tensor, block: AttentionBlock) -> Tensor:
    return block.attend(phi, phi)


class TransformerBlock(AttentionBlock):
    """Pre-norm residual attention + feed-forward block."""

    def __init__(self, d: int, heads: int = 1, ffn_mult: int = 2, expose_probs: bool = False,
                 cross: bool = False) -> None:
        super().__init__(d, heads, expose_probs)
        self.ln_q = LayerNorm(d)
        self.ln_kv = LayerNorm(d) if cross else None
        self.ln_ff = LayerNorm(d)
        self.ff_in = Linear(d, ffn_mult * d)
        self.ff_out = Linear(ffn_mult * d, d)

    def __call__(self, x: Tensor, context: Tensor | None = None) -> Tensor:
        q = self.ln_q(x)
        kv = q if context is None else (self.ln_kv or self.ln_q)(context)
        h = x + self.attend(q, kv)
        return h + self.ff_out(self.ff_in(self.ln_ff(h)).relu())


def sinusoidal_positions(length: int, d: int) -> np.ndarray:
    pos = np.arange(length)[:, None]
    rates = np.exp(-math.log(10000.0) * (np.arange(0, d, 2) / d))
    table = np.zeros((length, d))
    table[:, 0::2] = np.sin(pos * rates)
    table[:, 1::2] = np.cos(pos * rates[: d // 2])
    return table


class TransformerStack(Module):
    """Pairwise cross-modal blocks followed by optional per-modality self-attention.

    For every destination modality, each other modality is fused in by its own
    chain of cross blocks; the per-source results are concatenated along the
    feature axis and projected back to width ``d``.
    """

    def __init__(self, modalities: Sequence[str], d: int, heads: int = 1, cross_depth: int = 1,
                 self_depth: int = 1, ffn_mult: int = 2) -> None:
        super().__init__()
        self.modalities = list(modalities)
        self.d = d
        self.cross = {
            f"{src}->{dst}": [TransformerBlock(d, heads, ffn_mult, cross=True) for _ in range(cross_depth)]
            for dst in self.modalities for src in self.modalities if src != dst
        }
        m = len(self.modalities)
        self.fuse = {dst: Linear((m - 1) * d, d) for dst in self.modalities}
        self.self_blocks = {
            name: [TransformerBlock(d, heads, ffn_mult, expose_probs=(i == self_depth - 1))
                   for i in range(self_depth)]
            for name in self.modalities
        }
        self.out_norm = {name: LayerNorm(d) for name in self.modalities}
        self._last_directions: list[str] = []

    @property
    def last_directions(self) -> list[str]:
        return list(self._last_directions)

    def directions(self) -> list[str]:
        return list(self.cross)

    def __call__(self, features: Mapping[str, Tensor]) -> tuple[dict[str, Tensor], dict[str, Tensor]]:
        missing = [m for m in self.modalities if m not in features]
        if missing:
            raise ContractError(f"transformer stack: no features for modalities {missing}")
        self._last_directions = []
        fused: dict[str, Tensor] = {}
        probs: dict[str, Tensor] = {}
        for dst in self.modalities:
            incoming = []
            for src in self.modalities:
                if src == dst:
                    continue
                key = f"{src}->{dst}"
                h = features[dst]
                for block in self.cross[key]:
                    h = block(h, features[src])
                self._last_directions.append(key)
                incoming.append(h)
            h = self.fuse[dst](T.concat(incoming, axis=-1))
            for block in self.self_blocks[dst]:
                h = block(h)
            if self.self_blocks[dst]:
                probs[dst] = self.self_blocks[dst][-1].last_probs
            fused[dst] = self.out_norm[dst](h)
        return fused, probs
