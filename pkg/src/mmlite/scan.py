"""Four-direction selective scan (LiteSS2D core).

Feature maps are flattened along four directions, each sequence runs
through the selective state-space recurrence

    h_t = exp(Δ_t A) ⊙ h_{t-1} + (Δ_t v_t) B_t
    y_t = C_t · h_t + D ⊙ v_t,      A = -exp(A_log)

and the four outputs are re-aligned and summed. One parameter set can serve
all four directions, in which case the directions are batched together.
"""
from __future__ import annotations

import math
from dataclasses import dataclass
from typing import Optional, Sequence, Union

import numpy as np

from .errors import DimensionError, NumericError
from .tensor import Tensor, apply, ops, report_macs

N_DIRECTIONS = 4


def direction_orders(H: int, W: int) -> np.ndarray:
    """Index arrays ``[4, H*W]``: sequence ``k`` at step ``t`` reads pixel ``order[k, t]``."""
    L = H * W
    row = np.arange(L)
    col = row.reshape(H, W).T.reshape(-1)
    return np.stack([row, col, row[::-1], col[::-1]])


def _merge_array(y: np.ndarray, order: np.ndarray) -> np.ndarray:
    parts = []
    for k in range(N_DIRECTIONS):
        part = np.empty_like(y[k])
        part[..., order[k]] = y[k]
        parts.append(part)
    # pairwise so that merging four copies of x is exactly 4x
    return (parts[0] + parts[1]) + (parts[2] + parts[3])


@dataclass
class DirectionalSequences:
    """Four directional flattenings stacked as ``[4, B, C, L]``.

    Order: row-major, column-major, reversed row-major, reversed column-major.
    """

    seqs: Tensor
    H: int
    W: int

    def __len__(self) -> int:
        return N_DIRECTIONS

    def __getitem__(self, k: int) -> Tensor:
        return ops.reshape(ops.narrow(self.seqs, 0, k, k + 1), self.seqs.shape[1:])


def scan_expand(x: Tensor) -> DirectionalSequences:
    if x.ndim != 4:
        raise DimensionError(f"scan_expand expects [B,C,H,W], got {list(x.shape)}")
    B, C, H, W = x.shape
    order = direction_orders(H, W)
    flat = x.data.reshape(B, C, H * W)
    out = np.transpose(flat[:, :, order], (2, 0, 1, 3))

    def bw(g):
        return (_merge_array(g, order).reshape(B, C, H, W),)

    return DirectionalSequences(apply("scan_expand", out, (x,), bw), H, W)


def scan_merge(ys: Union[Tensor, DirectionalSequences, Sequence[Tensor]], H: int, W: int) -> Tensor:
    """Inverse-permute each directional output to spatial layout and sum."""
    if isinstance(ys, DirectionalSequences):
        ys = ys.seqs
    elif not isinstance(ys, Tensor):
        ys = ops.stack(list(ys), axis=0)
    if ys.ndim != 4 or ys.shape[0] != N_DIRECTIONS:
        raise DimensionError(f"scan_merge expects [4,B,C,L], got {list(ys.shape)}")
    _, B, C, L = ys.shape
    if L != H * W:
        raise DimensionError(f"scan_merge: sequence length {L} != H*W = {H}*{W}")
    order = direction_orders(H, W)

    def bw(g):
        flat = g.reshape(B, C, L)
        return (np.ascontiguousarray(np.transpose(flat[:, :, order], (2, 0, 1, 3))),)

    return apply("scan_merge", _merge_array(ys.data, order).reshape(B, C, H, W), (ys,), bw)


def discretize(A_log, delta, paper_literal: bool = False):
    """Zero-order-hold state decay and Euler input scale.

    ``A_log`` is ``[..., D, N]`` and ``delta`` is ``[..., D]``; returns
    ``(A_bar [..., D, N], scale [..., D])`` with ``A_bar = exp(Δ·(-exp(A_log)))``
    and ``scale = Δ``. ``paper_literal`` uses ``A_bar = exp(A_log)`` and a unit
    input scale instead.
    """
    A_log = A_log.data if isinstance(A_log, Tensor) else np.asarray(A_log, dtype=np.result_type(A_log, 0.0))
    delta = delta.data if isinstance(delta, Tensor) else np.asarray(delta, dtype=np.result_type(delta, 0.0))
    if paper_literal:
        A_bar = np.broadcast_to(np.exp(A_log), np.broadcast_shapes(A_log.shape, delta.shape + A_log.shape[-1:]))
        return A_bar, np.ones_like(delta)
    A = -np.exp(A_log)
    return np.exp(delta[..., None] * A), delta


def _reduce_to(g: np.ndarray, k_param: int) -> np.ndarray:
    return g.sum(axis=0, keepdims=True) if k_param == 1 and g.shape[0] != 1 else g


def selective_recurrence(v: Tensor, delta: Tensor, Bm: Tensor, Cm: Tensor,
                         A_log: Tensor, D: Tensor, paper_literal: bool = False) -> Tensor:
    """Sequential selective scan over stacked directions.

    Shapes: ``v, delta`` are ``[K, B, Din, L]``; ``Bm, Cm`` are ``[K, B, N, L]``;
    ``A_log`` is ``[K', Din, N]`` and ``D`` is ``[K', Din]`` with ``K'`` in
    ``{1, K}``. Returns ``y`` shaped like ``v``. Initial state is zero.
    """
    K, Bsz, Din, L = v.shape
    Kp, _, N = A_log.shape
    if delta.shape != v.shape or Bm.shape != (K, Bsz, N, L) or Cm.shape != Bm.shape \
            or A_log.shape[1] != Din or D.shape != (Kp, Din) or Kp not in (1, K):
        raise DimensionError(
            f"selective_recurrence: v {list(v.shape)}, delta {list(delta.shape)}, B {list(Bm.shape)}, "
            f"C {list(Cm.shape)}, A_log {list(A_log.shape)}, D {list(D.shape)}")
    vt = np.transpose(v.data, (3, 0, 1, 2))
    dt = np.transpose(delta.data, (3, 0, 1, 2))
    Bt = np.ascontiguousarray(np.transpose(Bm.data, (3, 0, 1, 2)))
    Ct = np.ascontiguousarray(np.transpose(Cm.data, (3, 0, 1, 2)))
    A_full = np.broadcast_to(A_log.data, (K, Din, N))
    Dfull = np.broadcast_to(D.data, (K, Din))
    if paper_literal:
        dA = np.broadcast_to(np.exp(A_full)[None, :, None], (L, K, Bsz, Din, N))
        u = vt
    else:
        dA, step = discretize(A_full[None, :, None], dt)
        u = step * vt
    hs = u[..., None] * Bt[:, :, :, None, :]
    tmp = np.empty_like(hs[0])
    for t in range(1, L):
        np.multiply(dA[t], hs[t - 1], out=tmp)
        hs[t] += tmp
    yt = np.matmul(hs, Ct[..., None])[..., 0]
    yt += Dfull[None, :, None] * vt
    if not np.isfinite(yt).all():
        bad = int(np.argmin(np.isfinite(yt).reshape(L, -1).all(axis=1)))
        raise NumericError(f"selective scan: non-finite state at timestep {bad}")
    report_macs("selective_scan", 2 * K * Bsz * L * Din * N)
    report_macs("feedthrough", K * Bsz * L * Din)

    def bw(gy):
        gyt = np.transpose(gy, (3, 0, 1, 2))
        gC = np.matmul(gyt[..., None, :], hs)[..., 0, :]
        gh = gyt[..., None] * Ct[:, :, :, None, :]
        for t in range(L - 2, -1, -1):
            np.multiply(dA[t + 1], gh[t + 1], out=tmp)
            gh[t] += tmp
        gu = np.matmul(gh, Bt[..., None])[..., 0]
        gB = np.matmul(u[..., None, :], gh)[..., 0, :]
        gD = _reduce_to(np.einsum("lkbd,lkbd->kd", gyt, vt), Kp)
        # gradient w.r.t. the per-step decay, times the decay itself
        t1 = np.zeros_like(gh)
        np.multiply(gh[1:], hs[:-1], out=t1[1:])
        t1 *= dA
        if paper_literal:
            gv = gyt * Dfull[None, :, None] + gu
            gdelta = np.zeros_like(dt)
            gA_log = _reduce_to(t1.sum(axis=(0, 2)), Kp)
        else:
            gv = gyt * Dfull[None, :, None] + gu * dt
            A = -np.exp(A_full)
            gdelta = gu * vt + (t1 * A[None, :, None]).sum(axis=-1)
            t1 *= dt[..., None]
            gA_log = _reduce_to(t1.sum(axis=(0, 2)) * A, Kp)
        back = lambda a: np.ascontiguousarray(np.transpose(a, (1, 2, 3, 0)))  # noqa: E731
        return back(gv), back(gdelta), back(gB), back(gC), gA_log, gD

    y = np.transpose(yt, (1, 2, 3, 0))
    return apply("selective_recurrence", y, (v, delta, Bm, Cm, A_log, D), bw)


def directional_linear(x: Tensor, W: Tensor, b: Optional[Tensor] = None) -> Tensor:
    """Per-direction projection of channel axis: ``[K,B,Din,L] x [K',Dout,Din] -> [K,B,Dout,L]``."""
    K, Bsz, Din, L = x.shape
    Kp, Dout, Din_w = W.shape
    if Din_w != Din or Kp not in (1, K) or (b is not None and b.shape != (Kp, Dout)):
        raise DimensionError(f"directional_linear: x {list(x.shape)} vs W {list(W.shape)}")
    Wf = np.broadcast_to(W.data, (K, Dout, Din))[:, None]
    xd = x.data
    y = np.matmul(Wf, xd)
    if b is not None:
        y += np.broadcast_to(b.data, (K, Dout))[:, None, :, None]
    report_macs("directional_linear", K * Bsz * L * Dout * Din)

    def bw(g):
        gx = np.matmul(np.swapaxes(Wf, -1, -2), g)
        gW = _reduce_to(np.matmul(g, np.swapaxes(xd, -1, -2)).sum(axis=1), Kp)
        gb = _reduce_to(g.sum(axis=(1, 3)), Kp) if b is not None else None
        return gx, gW, gb

    inputs = (x, W) if b is None else (x, W, b)
    return apply("directional_linear", y, inputs, bw)


def inverse_softplus(y: np.ndarray) -> np.ndarray:
    return y + np.log(-np.expm1(-y))


@dataclass
class S6Params:
    """Selective-scan parameters with a leading direction axis ``K`` in ``{1, 4}``.

    ``x_proj`` packs the Δ-rank, B and C projections as ``[K, R+2N, Din]``.
    ``block_scope`` records whether ``A_log``/``D`` are owned by the block or
    by its stage (the same tensor objects then appear in several blocks).
    """

    x_proj: Tensor
    dt_weight: Tensor
    dt_bias: Tensor
    A_log: Tensor
    D: Tensor
    block_scope: str = "per_block"
    paper_literal: bool = False

    def __post_init__(self):
        K, Din, N = self.A_log.shape
        R = self.dt_weight.shape[-1]
        if N < 1 or R < 1:
            raise DimensionError("S6Params: state size and dt rank must be >= 1")
        expect = {
            "x_proj": (K, R + 2 * N, Din), "dt_weight": (K, Din, R),
            "dt_bias": (K, Din), "D": (K, Din),
        }
        for name, shape in expect.items():
            if getattr(self, name).shape != shape:
                raise DimensionError(f"S6Params.{name}: expected {list(shape)}, got "
                                     f"{list(getattr(self, name).shape)}")
        if K not in (1, N_DIRECTIONS):
            raise DimensionError(f"S6Params: direction axis must be 1 or 4, got {K}")

    @property
    def directions(self) -> int:
        return self.A_log.shape[0]

    @property
    def direction_scope(self) -> str:
        return "shared_directions" if self.directions == 1 else "per_direction"

    @property
    def d_inner(self) -> int:
        return self.A_log.shape[1]

    @property
    def d_state(self) -> int:
        return self.A_log.shape[2]

    @property
    def dt_rank(self) -> int:
        return self.dt_weight.shape[-1]

    @classmethod
    def init(cls, d_inner: int, d_state: int, dt_rank: int, directions: int = 1,
             rng: Optional[np.random.Generator] = None, dtype=np.float32,
             dt_min: float = 1e-3, dt_max: float = 0.1) -> "S6Params":
        rng = rng if rng is not None else np.random.default_rng(0)
        K, Din, N, R = directions, d_inner, d_state, dt_rank
        bound = 1.0 / math.sqrt(Din)
        x_proj = rng.uniform(-bound, bound, size=(K, R + 2 * N, Din))
        dt_std = R ** -0.5
        dt_weight = rng.uniform(-dt_std, dt_std, size=(K, Din, R))
        dt = np.exp(rng.uniform(math.log(dt_min), math.log(dt_max), size=(K, Din)))
        A_log = np.broadcast_to(np.log(np.arange(1, N + 1, dtype=np.float64)), (K, Din, N))
        mk = lambda a: Tensor(np.array(a, dtype=dtype))  # noqa: E731
        return cls(mk(x_proj), mk(dt_weight), mk(inverse_softplus(dt)), mk(A_log),
                   mk(np.ones((K, Din))))

    def tensors(self) -> dict:
        return {"x_proj": self.x_proj, "dt_weight": self.dt_weight, "dt_bias": self.dt_bias,
                "A_log": self.A_log, "D": self.D}


def s6_forward(seq: Tensor, p: S6Params) -> Tensor:
    """Selective scan of ``[B, Din, L]`` (or stacked ``[K, B, Din, L]``) sequences."""
    single = seq.ndim == 3
    x = ops.reshape(seq, (1,) + seq.shape) if single else seq
    if x.ndim != 4 or x.shape[2] != p.d_inner:
        raise DimensionError(f"s6_forward: sequence {list(seq.shape)} for d_inner {p.d_inner}")
    if p.directions not in (1, x.shape[0]):
        raise DimensionError(f"s6_forward: {p.directions} parameter sets for {x.shape[0]} sequences")
    R, N = p.dt_rank, p.d_state
    proj = directional_linear(x, p.x_proj)
    dt_raw, Bm, Cm = ops.split(proj, [R, N, N], axis=2)
    delta = ops.softplus(directional_linear(dt_raw, p.dt_weight, p.dt_bias))
    y = selective_recurrence(x, delta, Bm, Cm, p.A_log, p.D, p.paper_literal)
    return ops.reshape(y, seq.shape) if single else y


def s6_oracle(seq, p: S6Params, direction: int = 0) -> np.ndarray:
    """Scalar-loop reference for :func:`s6_forward` on one direction.

    Walks batch, timestep, channel and state index one scalar at a time in
    float64 Python arithmetic. Returns an array in the input's dtype.
    """
    arr = seq.data if isinstance(seq, Tensor) else np.asarray(seq)
    Bsz, Din, L = arr.shape
    k = direction if p.directions > 1 else 0
    Wx = p.x_proj.data[k].tolist()
    Wdt = p.dt_weight.data[k].tolist()
    bdt = p.dt_bias.data[k].tolist()
    A_log = p.A_log.data[k].tolist()
    Dv = p.D.data[k].tolist()
    R, N = p.dt_rank, p.d_state
    x = arr.tolist()
    out = [[[0.0] * L for _ in range(Din)] for _ in range(Bsz)]
    for b in range(Bsz):
        h = [[0.0] * N for _ in range(Din)]
        for t in range(L):
            v = [x[b][d][t] for d in range(Din)]
            proj = []
            for e in range(R + 2 * N):
                acc = 0.0
                for d in range(Din):
                    acc += Wx[e][d] * v[d]
                proj.append(acc)
            for d in range(Din):
                z = bdt[d]
                for r in range(R):
                    z += Wdt[d][r] * proj[r]
                delta = max(z, 0.0) + math.log1p(math.exp(-abs(z)))
                acc = 0.0
                for n in range(N):
                    if p.paper_literal:
                        decay, drive = math.exp(A_log[d][n]), proj[R + n] * v[d]
                    else:
                        decay = math.exp(delta * -math.exp(A_log[d][n]))
                        drive = delta * proj[R + n] * v[d]
                    h[d][n] = decay * h[d][n] + drive
                    acc += proj[R + N + n] * h[d][n]
                y = acc + Dv[d] * v[d]
                if not math.isfinite(y):
                    raise NumericError(f"s6_oracle: non-finite output at timestep {t}")
                out[b][d][t] = y
    return np.asarray(out, dtype=arr.dtype)


@dataclass
class LiteSS2DWeights:
    """Weights of one 2D selective-scan branch operating on ``C`` channels.

    ``conv`` lists the depthwise stages as ``(kernel, bias)`` pairs: a single
    3x3 stage, or the separable 3x1 then 1x3 pair.
    """

    norm_weight: Tensor
    norm_bias: Tensor
    in_proj: Tensor
    conv: list
    s6: S6Params
    out_norm_weight: Tensor
    out_norm_bias: Tensor
    out_proj: Tensor

    @property
    def channels(self) -> int:
        return self.in_proj.shape[1]

    @property
    def d_inner(self) -> int:
        return self.s6.d_inner


def litess2d_forward(x: Tensor, w: LiteSS2DWeights, eps: float = 1e-5) -> Tensor:
    if x.ndim != 4 or x.shape[1] != w.channels:
        raise DimensionError(f"litess2d_forward: input {list(x.shape)} for branch width {w.channels}")
    _, _, H, W = x.shape
    Di = w.d_inner
    xl = ops.layer_norm(ops.permute(x, (0, 2, 3, 1)), w.norm_weight, w.norm_bias, eps)
    xs, z = ops.split(ops.linear(xl, w.in_proj), [Di, Di], axis=-1)
    u = ops.permute(xs, (0, 3, 1, 2))
    for kernel, bias in w.conv:
        u = ops.silu(ops.depthwise_conv2d(u, kernel, padding="same", bias=bias))
    seqs = scan_expand(u)
    ys = s6_forward(seqs.seqs, w.s6)
    merged = ops.permute(scan_merge(ys, H, W), (0, 2, 3, 1))
    y = ops.layer_norm(merged, w.out_norm_weight, w.out_norm_bias, eps)
    y = ops.linear(ops.mul(y, ops.silu(z)), w.out_proj)
    return ops.permute(y, (0, 3, 1, 2))
