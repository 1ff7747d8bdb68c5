"""Network assembly: patch embedding, Lite-Conv-SSM blocks, patch merging, classifier.

Parameters live in a flat, ordered registry (name -> Tensor). Shared tensors
appear once under a canonical name; other sites are recorded as aliases that
resolve to the very same Tensor object.
"""
from __future__ import annotations

import math
from collections import OrderedDict
from dataclasses import dataclass
from typing import Optional

import numpy as np

from .config import ModelConfig
from .errors import DimensionError, ResolutionError
from .scan import LiteSS2DWeights, S6Params, litess2d_forward
from .tensor import Tensor, ops

LN_EPS = 1e-5


# ---------------------------------------------------------------------------
# building blocks

def patch_embed(img: Tensor, w: dict) -> Tensor:
    """Non-overlapping ``p x p`` patches projected to ``d1`` channels, then layer norm."""
    B, C, H, W = img.shape
    proj = w["proj.weight"]
    p = int(round(math.sqrt(proj.shape[1] / C)))
    if p * p * C != proj.shape[1]:
        raise DimensionError(f"patch_embed: weight {list(proj.shape)} does not fit {C} input channels")
    if H % p or W % p:
        raise ResolutionError(f"patch_embed: resolution {H}x{W} not divisible by patch size {p}")
    x = ops.reshape(img, (B, C, H // p, p, W // p, p))
    x = ops.permute(x, (0, 2, 4, 1, 3, 5))
    x = ops.reshape(x, (B, H // p, W // p, C * p * p))
    x = ops.linear(x, proj, w["proj.bias"])
    x = ops.layer_norm(x, w["norm.weight"], w["norm.bias"], LN_EPS)
    return ops.permute(x, (0, 3, 1, 2))


def channel_shuffle(x: Tensor, groups: int) -> Tensor:
    B, C, H, W = x.shape
    if C % groups:
        raise DimensionError(f"channel_shuffle: {C} channels not divisible by {groups} groups")
    y = ops.reshape(x, (B, groups, C // groups, H, W))
    y = ops.permute(y, (0, 2, 1, 3, 4))
    return ops.reshape(y, (B, C, H, W))


def conv_branch_forward(xh: Tensor, w: dict) -> Tensor:
    """Local-feature half of a block.

    Standard variant: 3x3 conv, norm, SiLU, 3x3 conv, norm, SiLU, 1x1 conv.
    Lite variant: depthwise 3x1, SiLU, depthwise 1x3, then a pointwise conv.
    """
    if "conv1.weight" in w:
        y = ops.conv2d(xh, w["conv1.weight"], bias=w["conv1.bias"])
        y = ops.silu(ops.channel_layer_norm(y, w["norm1.weight"], w["norm1.bias"], LN_EPS))
        y = ops.conv2d(y, w["conv2.weight"], bias=w["conv2.bias"])
        y = ops.silu(ops.channel_layer_norm(y, w["norm2.weight"], w["norm2.bias"], LN_EPS))
        return ops.pointwise_conv2d(y, w["pw.weight"], w["pw.bias"])
    y = ops.silu(ops.depthwise_conv2d(xh, w["dw_row.weight"], bias=w["dw_row.bias"]))
    y = ops.depthwise_conv2d(y, w["dw_col.weight"], bias=w["dw_col.bias"])
    return ops.pointwise_conv2d(y, w["pw.weight"])


@dataclass
class BlockWeights:
    conv: dict
    ssm: LiteSS2DWeights
    shuffle_groups: int = 2


def lite_block_forward(x: Tensor, w: BlockWeights) -> Tensor:
    """Split channels, run the conv and scan halves, concat, shuffle, add the input."""
    B, C, H, W = x.shape
    if C % 2:
        raise DimensionError(f"lite_block_forward: odd channel count {C}")
    left, right = ops.split(x, [C // 2, C // 2], axis=1)
    y = ops.concat([conv_branch_forward(left, w.conv), litess2d_forward(right, w.ssm, LN_EPS)], axis=1)
    return ops.add(channel_shuffle(y, w.shuffle_groups), x)


def patch_merge(x: Tensor, w: dict) -> Tensor:
    """2x2 neighbourhood concat to ``4C``, layer norm, linear to ``2C``."""
    B, C, H, W = x.shape
    if H % 2 or W % 2:
        raise ResolutionError(f"patch_merge: odd resolution {H}x{W}")
    y = ops.reshape(x, (B, C, H // 2, 2, W // 2, 2))
    y = ops.permute(y, (0, 2, 4, 5, 3, 1))
    y = ops.reshape(y, (B, H // 2, W // 2, 4 * C))
    y = ops.layer_norm(y, w["norm.weight"], w["norm.bias"], LN_EPS)
    y = ops.linear(y, w["proj.weight"])
    return ops.permute(y, (0, 3, 1, 2))


def classifier_head(x: Tensor, w: dict) -> Tensor:
    pooled = ops.mean(x, axis=(2, 3))
    pooled = ops.layer_norm(pooled, w["norm.weight"], w["norm.bias"], LN_EPS)
    return ops.linear(pooled, w["proj.weight"], w["proj.bias"])


# ---------------------------------------------------------------------------
# the model

class Model:
    """A built network: config, ordered parameter registry and alias table."""

    def __init__(self, config: ModelConfig, params: "OrderedDict[str, Tensor]", aliases: dict):
        self.config = config
        self.params = OrderedDict(params)
        self.aliases = dict(aliases)
        for t in self.params.values():
            t.requires_grad = True
        for alias, target in self.aliases.items():
            if target not in self.params or alias in self.params:
                raise DimensionError(f"bad alias {alias!r} -> {target!r}")
        self._assemble()

    def __getitem__(self, name: str) -> Tensor:
        return self.params[self.aliases.get(name, name)]

    def __call__(self, batch: Tensor) -> Tensor:
        return model_forward(self, batch)

    @property
    def dtype(self) -> np.dtype:
        return next(iter(self.params.values())).dtype

    def parameters(self) -> list:
        return list(self.params.values())

    def num_parameters(self) -> int:
        return int(sum(t.size for t in self.params.values()))

    def names_of(self, tensor: Tensor) -> list:
        names = [n for n, t in self.params.items() if t is tensor]
        return names + [a for a, n in self.aliases.items() if n in names]

    def astype(self, dtype) -> "Model":
        params = OrderedDict((n, Tensor(t.data.astype(dtype))) for n, t in self.params.items())
        return Model(self.config, params, self.aliases)

    def copy(self) -> "Model":
        return self.astype(self.dtype)

    def _group(self, prefix: str) -> dict:
        n = len(prefix)
        out = {name[n:]: t for name, t in self.params.items() if name.startswith(prefix)}
        out.update({a[n:]: self.params[c] for a, c in self.aliases.items() if a.startswith(prefix)})
        return out

    def _assemble(self) -> None:
        cfg = self.config
        self.stem = self._group("stem.")
        self.head = self._group("head.")
        self.stages = []
        for s, depth in enumerate(cfg.stage_depths):
            blocks = []
            for b in range(depth):
                pre = f"stages.{s}.blocks.{b}."
                conv = self._group(pre + "conv.")
                ssm = self._group(pre + "ssm.")
                if cfg.lite_conv_branch:
                    dw = [(ssm["dw_row.weight"], ssm["dw_row.bias"]), (ssm["dw_col.weight"], ssm["dw_col.bias"])]
                else:
                    dw = [(ssm["dw.weight"], ssm["dw.bias"])]
                s6 = S6Params(ssm["x_proj.weight"], ssm["dt_proj.weight"], ssm["dt_proj.bias"],
                              ssm["A_log"], ssm["D"],
                              block_scope="per_stage" if cfg.share_AD_per_stage else "per_block",
                              paper_literal=cfg.paper_literal_discretization)
                lw = LiteSS2DWeights(ssm["norm.weight"], ssm["norm.bias"], ssm["in_proj.weight"], dw, s6,
                                     ssm["out_norm.weight"], ssm["out_norm.bias"], ssm["out_proj.weight"])
                blocks.append(BlockWeights(conv, lw, cfg.shuffle_groups))
            merge = self._group(f"stages.{s}.merge.") if s < 3 else None
            self.stages.append((blocks, merge))


def model_forward(m: Model, batch: Tensor, features: bool = False) -> Tensor:
    """Logits ``[B, num_classes]`` for an NCHW batch at the configured resolution."""
    cfg = m.config
    if not isinstance(batch, Tensor):
        batch = Tensor(np.asarray(batch, dtype=m.dtype))
    if batch.ndim != 4 or batch.shape[1] != cfg.in_channels:
        raise DimensionError(f"model_forward: expected [B,{cfg.in_channels},H,W], got {list(batch.shape)}")
    if tuple(batch.shape[2:]) != tuple(cfg.input_resolution):
        raise ResolutionError(f"model_forward: input {batch.shape[2]}x{batch.shape[3]} does not match "
                              f"configured resolution {cfg.input_resolution[0]}x{cfg.input_resolution[1]}")
    if batch.dtype != m.dtype:
        batch = Tensor._wrap(batch.data.astype(m.dtype), batch.requires_grad) if not batch.requires_grad \
            else Tensor(batch.data.astype(m.dtype), requires_grad=True)
    x = patch_embed(batch, m.stem)
    for blocks, merge in m.stages:
        for w in blocks:
            x = lite_block_forward(x, w)
        if merge is not None:
            x = patch_merge(x, merge)
    return x if features else classifier_head(x, m.head)


# ---------------------------------------------------------------------------
# construction

def _uniform(rng, shape, fan_in, dtype):
    bound = 1.0 / math.sqrt(fan_in)
    return Tensor(rng.uniform(-bound, bound, size=shape).astype(dtype))


def build_model(cfg: ModelConfig, seed: int = 0, dtype=np.float32) -> Model:
    """Deterministically initialise a model; sharing flags become aliased storage."""
    cfg.validate(for_build=True)
    rng = np.random.default_rng(seed)
    params: OrderedDict = OrderedDict()
    aliases: dict = {}
    zeros = lambda *s: Tensor(np.zeros(s, dtype=dtype))  # noqa: E731
    ones = lambda *s: Tensor(np.ones(s, dtype=dtype))  # noqa: E731

    p, cin, d1 = cfg.patch_size, cfg.in_channels, cfg.stage_dims[0]
    params["stem.proj.weight"] = _uniform(rng, (d1, cin * p * p), cin * p * p, dtype)
    params["stem.proj.bias"] = zeros(d1)
    params["stem.norm.weight"] = ones(d1)
    params["stem.norm.bias"] = zeros(d1)

    for s, (dim, depth) in enumerate(zip(cfg.stage_dims, cfg.stage_depths)):
        c, Di, N, R, K = cfg.branch_width(s), cfg.d_inner(s), cfg.state_size, cfg.rank(s), cfg.directions
        if cfg.share_AD_per_stage:
            shared = S6Params.init(Di, N, R, K, rng=rng, dtype=dtype)
            params[f"stages.{s}.A_log"] = shared.A_log
            params[f"stages.{s}.D"] = shared.D
        for b in range(depth):
            pre = f"stages.{s}.blocks.{b}."
            if cfg.lite_conv_branch:
                params[pre + "conv.dw_row.weight"] = _uniform(rng, (c, 3, 1), 3, dtype)
                params[pre + "conv.dw_row.bias"] = zeros(c)
                params[pre + "conv.dw_col.weight"] = _uniform(rng, (c, 1, 3), 3, dtype)
                params[pre + "conv.dw_col.bias"] = zeros(c)
                params[pre + "conv.pw.weight"] = _uniform(rng, (c, c), c, dtype)
            else:
                for i in (1, 2):
                    params[pre + f"conv.conv{i}.weight"] = _uniform(rng, (c, c, 3, 3), 9 * c, dtype)
                    params[pre + f"conv.conv{i}.bias"] = zeros(c)
                    params[pre + f"conv.norm{i}.weight"] = ones(c)
                    params[pre + f"conv.norm{i}.bias"] = zeros(c)
                params[pre + "conv.pw.weight"] = _uniform(rng, (c, c), c, dtype)
                params[pre + "conv.pw.bias"] = zeros(c)

            params[pre + "ssm.norm.weight"] = ones(c)
            params[pre + "ssm.norm.bias"] = zeros(c)
            params[pre + "ssm.in_proj.weight"] = _uniform(rng, (2 * Di, c), c, dtype)
            if cfg.lite_conv_branch:
                params[pre + "ssm.dw_row.weight"] = _uniform(rng, (Di, 3, 1), 3, dtype)
                params[pre + "ssm.dw_row.bias"] = zeros(Di)
                params[pre + "ssm.dw_col.weight"] = _uniform(rng, (Di, 1, 3), 3, dtype)
                params[pre + "ssm.dw_col.bias"] = zeros(Di)
            else:
                params[pre + "ssm.dw.weight"] = _uniform(rng, (Di, 3, 3), 9, dtype)
                params[pre + "ssm.dw.bias"] = zeros(Di)
            s6 = S6Params.init(Di, N, R, K, rng=rng, dtype=dtype)
            params[pre + "ssm.x_proj.weight"] = s6.x_proj
            params[pre + "ssm.dt_proj.weight"] = s6.dt_weight
            params[pre + "ssm.dt_proj.bias"] = s6.dt_bias
            if cfg.share_AD_per_stage:
                aliases[pre + "ssm.A_log"] = f"stages.{s}.A_log"
                aliases[pre + "ssm.D"] = f"stages.{s}.D"
            else:
                params[pre + "ssm.A_log"] = s6.A_log
                params[pre + "ssm.D"] = s6.D
            params[pre + "ssm.out_norm.weight"] = ones(Di)
            params[pre + "ssm.out_norm.bias"] = zeros(Di)
            params[pre + "ssm.out_proj.weight"] = _uniform(rng, (c, Di), Di, dtype)
        if s < 3:
            params[f"stages.{s}.merge.norm.weight"] = ones(4 * dim)
            params[f"stages.{s}.merge.norm.bias"] = zeros(4 * dim)
            params[f"stages.{s}.merge.proj.weight"] = _uniform(rng, (2 * dim, 4 * dim), 4 * dim, dtype)

    d4 = cfg.stage_dims[-1]
    params["head.norm.weight"] = ones(d4)
    params["head.norm.bias"] = zeros(d4)
    params["head.proj.weight"] = _uniform(rng, (cfg.num_classes, d4), d4, dtype)
    params["head.proj.bias"] = zeros(cfg.num_classes)
    for name, t in params.items():
        t.name = name
    return Model(cfg, params, aliases)


def registry_bytes(m: Model) -> bytes:
    """Canonical byte image of the registry, for determinism comparisons."""
    parts = []
    for name, t in m.params.items():
        parts.append(name.encode())
        parts.append(np.ascontiguousarray(t.data).tobytes())
    for a, c in sorted(m.aliases.items()):
        parts.append(f"{a}->{c}".encode())
    return b"\0".join(parts)


def zero_branch_outputs(m: Model) -> None:
    """Zero both branch output projections in every block (blocks become identities)."""
    for name, t in m.params.items():
        if name.endswith("conv.pw.weight") or name.endswith("conv.pw.bias") or name.endswith("ssm.out_proj.weight"):
            t.data[...] = 0


__all__ = [
    "BlockWeights", "Model", "build_model", "channel_shuffle", "classifier_head", "conv_branch_forward",
    "lite_block_forward", "model_forward", "patch_embed", "patch_merge", "registry_bytes",
    "zero_branch_outputs",
]
