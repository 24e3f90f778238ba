"""The co-training graph: shared stems, unimodal tails and heads, multimodal branch."""

from __future__ import annotations

from dataclasses import dataclass, field
from typing import Mapping, Sequence

import numpy as np

from . import tensor as T
from .config import (
    AttentionSpec,
    Conv1dSpec,
    ExperimentConfig,
    ModalityConfig,
    PointwiseSpec,
    PoolSpatialSpec,
    layer_shapes,
)
from .data import MultimodalBatch
from .errors import ConfigError, ContractError, ModalityLookupError, ShapeError
from .nn import Conv1d, Linear, Module, TransformerBlock, TransformerStack, init_params, sinusoidal_positions
from .tensor import Tensor

__all__ = [
    "Branch",
    "TokenMaker",
    "MultimodalBranch",
    "CoTrainModel",
    "UnimodalModel",
    "BranchOutputs",
    "build_model",
    "build_unimodal",
    "forward_all",
    "tokens_from_features",
    "extract_unimodal",
    "FORWARD_MODES",
]

FORWARD_MODES = ("cotrain", "frozen_shared_mm", "no_mm")

_ACTIVATIONS = {"relu": T.relu, "tanh": T.tanh, "none": lambda x: x}


class _Pointwise(Linear):
    """Linear map over the channel axis of a channel-first [B, C, ...] map."""

    def __init__(self, c_in: int, c_out: int, activation: str) -> None:
        super().__init__(c_in, c_out)
        self.activation = activation

    def __call__(self, x: Tensor) -> Tensor:
        perm = (0, *range(2, x.ndim), 1)
        inv = (0, x.ndim - 1, *range(1, x.ndim - 1))
        y = super().__call__(x.transpose(perm)).transpose(inv)
        return _ACTIVATIONS[self.activation](y)


class _Conv(Conv1d):
    def __init__(self, c_in: int, spec: Conv1dSpec) -> None:
        pad = spec.kernel // 2 if spec.padding is None else spec.padding
        super().__init__(c_in, spec.channels, spec.kernel, spec.stride, pad)
        self.activation = spec.activation

    def __call__(self, x: Tensor) -> Tensor:
        return _ACTIVATIONS[self.activation](super().__call__(x))


class _PoolSpatial(Module):
    def __call__(self, x: Tensor) -> Tensor:
        return T.mean_pool(x, tuple(range(3, x.ndim))) if x.ndim > 3 else x


class _SelfAttention(TransformerBlock):
    """Transformer block applied to a [B, C, T] map with tokens along T."""

    def __init__(self, d: int, spec: AttentionSpec) -> None:
        super().__init__(d, spec.heads, spec.ffn_mult, expose_probs=True)

    def __call__(self, x: Tensor) -> Tensor:
        return super().__call__(x.swapaxes(1, 2)).swapaxes(1, 2)


def _make_layer(spec, shape_in: tuple[int, ...]) -> Module:
    c_in = shape_in[0]
    if isinstance(spec, PointwiseSpec):
        return _Pointwise(c_in, spec.channels, spec.activation)
    if isinstance(spec, Conv1dSpec):
        return _Conv(c_in, spec)
    if isinstance(spec, PoolSpatialSpec):
        return _PoolSpatial()
    if isinstance(spec, AttentionSpec):
        return _SelfAttention(c_in, spec)
    raise ConfigError(f"unknown layer kind {spec!r}")


class Branch(Module):
    """One modality's unimodal model: ``stem`` (shared) -> ``tail`` -> ``head``."""

    def __init__(self, cfg: ModalityConfig, n_outputs: int) -> None:
        super().__init__()
        try:
            shapes = layer_shapes(cfg)
        except ValueError as err:
            raise ConfigError(str(err)) from None
        self.name = cfg.name
        self.cfg, self.n_outputs = cfg, n_outputs
        layers = [_make_layer(spec, shapes[i]) for i, spec in enumerate(cfg.layers)]
        self.stem = layers[:cfg.attach_after]
        self.tail = layers[cfg.attach_after:]
        self.stem_shape = shapes[cfg.attach_after]
        self.feature_width = shapes[-1][0]
        self.head = Linear(self.feature_width, n_outputs)

    @property
    def has_attention(self) -> bool:
        return any(isinstance(layer, _SelfAttention) for layer in self.tail)

    def stem_forward(self, x: Tensor) -> Tensor:
        for layer in self.stem:
            x = layer(x)
        return x

    def tail_forward(self, phi: Tensor) -> tuple[Tensor, Tensor | None]:
        """Final hidden feature [B, C] and the last tail self-attention probabilities."""
        h = phi
        probs = None
        for layer in self.tail:
            h = layer(h)
            if isinstance(layer, _SelfAttention):
                probs = layer.last_probs
        feat = T.mean_pool(h, tuple(range(2, h.ndim)))
        return feat, probs

    def __call__(self, x: Tensor) -> Tensor:
        feat, _ = self.tail_forward(self.stem_forward(x))
        return self.head(feat)


class TokenMaker(Module):
    """Spatially pool a stem map, put time on the token axis, project to ``d``."""

    def __init__(self, stem_shape: Sequence[int], d: int, project: bool = True) -> None:
        super().__init__()
        self.pool_axes = tuple(range(2, len(stem_shape)))  # per-example axes, batch excluded
        width = stem_shape[0]
        self.proj = Linear(width, d) if (project and width != d) else None
        if self.proj is None and width != d:
            raise ConfigError(f"token width {width} != d_model {d} without projection")

    def __call__(self, phi: Tensor) -> Tensor:
        return tokens_from_features(phi, self)


def tokens_from_features(phi: Tensor, recipe: TokenMaker | None = None) -> Tensor:
    """[B, C, T, *spatial] -> [B, T, d] tokens; an unbatched [C, T, *spatial] map gives [T, d].

    With ``recipe=None`` the input must already be a token matrix and is
    returned unchanged.
    """
    if recipe is None:
        return phi
    batched = phi.ndim == len(recipe.pool_axes) + 3
    if not batched and phi.ndim != len(recipe.pool_axes) + 2:
        raise ShapeError(f"token recipe pools axes {recipe.pool_axes} but features have shape {phi.shape}")
    offset = 1 if batched else 0
    x = phi
    if recipe.pool_axes:
        x = T.mean_pool(x, tuple(a + offset for a in recipe.pool_axes))
    x = x.swapaxes(offset, offset + 1)
    return recipe.proj(x) if recipe.proj is not None else x


class MultimodalBranch(TransformerStack):
    """Token makers, the cross-modal transformer and the multimodal head."""

    def __init__(self, cfg: ExperimentConfig, stem_shapes: Mapping[str, tuple[int, ...]]) -> None:
        mm = cfg.multimodal
        self.tokens = {name: TokenMaker(stem_shapes[name], mm.d_model, mm.project_tokens)
                       for name in cfg.names}
        super().__init__(cfg.names, mm.d_model, mm.heads, mm.cross_depth, mm.self_depth, mm.ffn_mult)
        self.head = Linear(len(cfg.names) * mm.d_model, cfg.task.n_outputs)
        self.positional = mm.positional_encoding

    def forward(self, stems: Mapping[str, Tensor]) -> tuple[Tensor, Tensor, dict[str, Tensor]]:
        feats = {}
        for name in self.modalities:
            tok = self.tokens[name](stems[name])
            if self.positional:
                tok = tok + Tensor(sinusoidal_positions(tok.shape[-2], self.d))
            feats[name] = tok
        fused, probs = self(feats)
        mm_feat = T.concat([T.mean_pool(fused[name], (1,)) for name in self.modalities], axis=-1)
        return self.head(mm_feat), mm_feat, probs


@dataclass
class BranchOutputs:
    """Everything the objectives consume from one forward pass.

    ``kt_*`` fields are the student-side values used by knowledge transfer;
    they alias the ``uni_*`` values unless KT is blocked at the stem.
    """

    uni_pred: dict[str, Tensor]
    uni_feat: dict[str, Tensor]
    uni_attn: dict[str, Tensor | None]
    stems: dict[str, Tensor]
    mm_pred: Tensor | None = None
    mm_feat: Tensor | None = None
    mm_attn: dict[str, Tensor] = field(default_factory=dict)
    kt_pred: dict[str, Tensor] = field(default_factory=dict)
    kt_feat: dict[str, Tensor] = field(default_factory=dict)
    kt_attn: dict[str, Tensor | None] = field(default_factory=dict)

    @property
    def feature_widths(self) -> dict[str, int]:
        out = {m: f.shape[-1] for m, f in self.uni_feat.items()}
        if self.mm_feat is not None:
            out["mm"] = self.mm_feat.shape[-1]
        return out


class CoTrainModel(Module):
    def __init__(self, cfg: ExperimentConfig) -> None:
        super().__init__()
        n_out = cfg.task.n_outputs
        self.config = cfg
        self.branches = {m.name: Branch(m, n_out) for m in cfg.modalities}
        self.mm = MultimodalBranch(cfg, {m: b.stem_shape for m, b in self.branches.items()})

    @property
    def modalities(self) -> list[str]:
        return list(self.branches)

    def named_parameters(self, prefix: str = ""):
        for name, branch in self.branches.items():
            yield from branch.named_parameters(name)
        yield from self.mm.named_parameters("mm")

    def named_init_specs(self, prefix: str = ""):
        for name, branch in self.branches.items():
            yield from branch.named_init_specs(name)
        yield from self.mm.named_init_specs("mm")

    def partition_of(self, name: str) -> str:
        """``stem:<m>``, ``tail:<m>``, ``head:<m>`` or ``mm``."""
        first, _, rest = name.partition(".")
        if first == "mm":
            return "mm"
        part = rest.split(".", 1)[0]
        if first not in self.branches or part not in ("stem", "tail", "head"):
            raise ContractError(f"parameter {name!r} is outside every partition")
        return f"{part}:{first}"

    def partitions(self) -> dict[str, list[str]]:
        out: dict[str, list[str]] = {}
        for m in self.branches:
            for part in ("stem", "tail", "head"):
                out[f"{part}:{m}"] = []
        out["mm"] = []
        for name, _ in self.named_parameters():
            out[self.partition_of(name)].append(name)
        return out

    def partition_params(self, key: str) -> list[Tensor]:
        params = dict(self.named_parameters())
        return [params[n] for n in self.partitions()[key]]


def build_model(cfg: ExperimentConfig, seed: int | None = None) -> CoTrainModel:
    """Build and initialise the co-training model (seed defaults to ``cfg.seed``)."""
    if len(cfg.modalities) < 2:
        raise ConfigError("co-training needs at least two modalities")
    model = CoTrainModel(cfg)
    init_params(model, cfg.seed if seed is None else seed)
    return model


def _as_tensor(x) -> Tensor:
    return x if isinstance(x, Tensor) else Tensor(x)


def forward_all(model: CoTrainModel, batch: MultimodalBatch | Mapping[str, np.ndarray],
                mode: str = "cotrain", kt_through_stem: bool = True) -> BranchOutputs:
    """Run every branch once; stems are computed once and shared by both paths.

    ``frozen_shared_mm`` feeds the multimodal branch a detached copy of each
    stem output; ``no_mm`` skips the multimodal branch entirely.
    """
    if mode not in FORWARD_MODES:
        raise ContractError(f"unknown forward mode {mode!r}; expected one of {FORWARD_MODES}")
    inputs = batch.inputs if isinstance(batch, MultimodalBatch) else batch
    missing = [m for m in model.modalities if m not in inputs]
    if missing:
        raise ContractError(f"batch is missing modalities {missing}")
    stems, preds, feats, attns = {}, {}, {}, {}
    kt_pred, kt_feat, kt_attn = {}, {}, {}
    for name, branch in model.branches.items():
        phi = branch.stem_forward(_as_tensor(inputs[name]))
        stems[name] = phi
        feat, attn = branch.tail_forward(phi)
        feats[name], attns[name] = feat, attn
        preds[name] = branch.head(feat)
        if kt_through_stem or mode == "no_mm":
            kt_pred[name], kt_feat[name], kt_attn[name] = preds[name], feat, attn
        else:
            f2, a2 = branch.tail_forward(T.detach(phi))
            kt_pred[name], kt_feat[name], kt_attn[name] = branch.head(f2), f2, a2
    out = BranchOutputs(preds, feats, attns, stems, kt_pred=kt_pred, kt_feat=kt_feat, kt_attn=kt_attn)
    if mode != "no_mm":
        mm_in = {m: T.detach(s) if mode == "frozen_shared_mm" else s for m, s in stems.items()}
        out.mm_pred, out.mm_feat, out.mm_attn = model.mm.forward(mm_in)
    return out


class UnimodalModel(Module):
    """A standalone unimodal model: one modality's stem, tail and head."""

    def __init__(self, branch: Branch) -> None:
        super().__init__()
        self.branch = branch
        self.modality = branch.name

    def named_parameters(self, prefix: str = ""):
        yield from self.branch.named_parameters(self.modality)

    def named_init_specs(self, prefix: str = ""):
        yield from self.branch.named_init_specs(self.modality)

    def __call__(self, x) -> Tensor:
        return self.branch(_as_tensor(x))


def build_unimodal(cfg: ExperimentConfig, modality: str, seed: int | None = None) -> UnimodalModel:
    """An independently built unimodal model (same architecture as the branch)."""
    mcfg = cfg.modality(modality)
    model = UnimodalModel(Branch(mcfg, cfg.task.n_outputs))
    init_params(model, cfg.seed if seed is None else seed)
    return model


def extract_unimodal(model: CoTrainModel, modality: str) -> UnimodalModel:
    """Drop the multimodal branch and the other modalities; parameters are copied."""
    if modality not in model.branches:
        raise ModalityLookupError(f"unknown modality {modality!r}; have {model.modalities}")
    source = model.branches[modality]
    branch = Branch(source.cfg, source.n_outputs)
    branch.load_state_dict(source.state_dict())
    return UnimodalModel(branch)
