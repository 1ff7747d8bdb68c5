"""Gradient-check cases and the built-in oracle/invariant self-test."""
from __future__ import annotations

import time
from collections import OrderedDict

import numpy as np

from .tensor import Tensor, grad_check, ops


def _t(rng, *shape, scale=1.0):
    return Tensor(rng.normal(scale=scale, size=shape), dtype=np.float64)


def small_litess2d(rng, channels=4, expand=2, d_state=4, dt_rank=1, directions=1, lite=True):
    """Random f64 weights for one scan branch, sized for finite differences."""
    from .scan import LiteSS2DWeights, S6Params

    Di = expand * channels
    s6 = S6Params.init(Di, d_state, dt_rank, directions, rng=rng, dtype=np.float64)
    if lite:
        conv = [(_t(rng, Di, 3, 1, scale=0.5), _t(rng, Di, scale=0.1)),
                (_t(rng, Di, 1, 3, scale=0.5), _t(rng, Di, scale=0.1))]
    else:
        conv = [(_t(rng, Di, 3, 3, scale=0.3), _t(rng, Di, scale=0.1))]
    return LiteSS2DWeights(Tensor(1 + 0.1 * rng.normal(size=channels)), _t(rng, channels, scale=0.1),
                           _t(rng, 2 * Di, channels, scale=0.5), conv, s6,
                           Tensor(1 + 0.1 * rng.normal(size=Di)), _t(rng, Di, scale=0.1),
                           _t(rng, channels, Di, scale=0.3))


def _ln_case(rng):
    return (lambda x, g, b: ops.layer_norm(x, g, b)), [_t(rng, 3, 5), _t(rng, 5), _t(rng, 5)], 1e-6


def _kd_case(rng):
    from .distill import kd_loss

    teacher = rng.normal(size=(4, 5))
    labels = np.array([0, 3, 1, 4])
    return (lambda s: kd_loss(s, teacher, labels, T=2.0, alpha=0.3)), [_t(rng, 4, 5)], 1e-6


def _s6_case(rng, directions=1, shared=1, literal=False):
    from .scan import S6Params, s6_forward

    p = S6Params.init(5, 3, 2, shared, rng=rng, dtype=np.float64)
    p = S6Params(p.x_proj, p.dt_weight, p.dt_bias, p.A_log, p.D, paper_literal=literal)
    if literal:
        p.A_log.data[...] = np.log(rng.uniform(0.3, 0.9, size=p.A_log.shape))
    seq = _t(rng, directions, 2, 5, 6, scale=0.5)

    def f(x, W, dtw, dtb, A, D):
        q = S6Params(W, dtw, dtb, A, D, paper_literal=literal)
        return s6_forward(x, q)

    return f, [seq, p.x_proj, p.dt_weight, p.dt_bias, p.A_log, p.D], 1e-5


def _litess2d_case(rng, lite=True):
    from .scan import litess2d_forward

    w = small_litess2d(rng, lite=lite)
    x = _t(rng, 1, 4, 3, 3)
    return (lambda x_, *_: litess2d_forward(x_, w)), [x, w.in_proj, w.s6.x_proj, w.s6.A_log, w.out_proj,
                                                  w.conv[0][0]], 1e-5


GRADCHECK_CASES = OrderedDict([
    ("linear", lambda r: (lambda x, W, b: ops.linear(x, W, b), [_t(r, 2, 3, 4), _t(r, 5, 4), _t(r, 5)], 1e-6)),
    ("depthwise_conv2d", lambda r: (lambda x, k, b: ops.depthwise_conv2d(x, k, 1, "same", b),
                                    [_t(r, 2, 3, 5, 4), _t(r, 3, 3, 3), _t(r, 3)], 1e-6)),
    ("depthwise_conv2d_stride2", lambda r: (lambda x, k: ops.depthwise_conv2d(x, k, 2, "valid"),
                                            [_t(r, 1, 2, 7, 5), _t(r, 2, 3, 1)], 1e-6)),
    ("conv2d", lambda r: (lambda x, W, b: ops.conv2d(x, W, 1, "same", b),
                          [_t(r, 2, 3, 4, 4), _t(r, 2, 3, 3, 3), _t(r, 2)], 1e-6)),
    ("pointwise_conv2d", lambda r: (lambda x, W, b: ops.pointwise_conv2d(x, W, b),
                                    [_t(r, 2, 3, 4, 3), _t(r, 5, 3), _t(r, 5)], 1e-6)),
    ("layer_norm", _ln_case),
    ("silu", lambda r: (ops.silu, [_t(r, 3, 4, scale=2.0)], 1e-6)),
    ("softplus", lambda r: (ops.softplus, [_t(r, 3, 4, scale=2.0)], 1e-6)),
    ("exp", lambda r: (ops.exp, [_t(r, 3, 4)], 1e-6)),
    ("softmax", lambda r: (ops.softmax, [_t(r, 3, 6)], 1e-6)),
    ("log_softmax", lambda r: (ops.log_softmax, [_t(r, 3, 6)], 1e-6)),
    ("cross_entropy", lambda r: ((lambda z: ops.cross_entropy(z, np.array([1, 0, 4]))), [_t(r, 3, 5)], 1e-6)),
    ("kd_loss", _kd_case),
    ("s6_forward", _s6_case),
    ("s6_forward_4dir_shared", lambda r: _s6_case(r, directions=4, shared=1)),
    ("s6_forward_4dir_separate", lambda r: _s6_case(r, directions=4, shared=4)),
    ("s6_forward_literal", lambda r: _s6_case(r, literal=True)),
    ("litess2d_forward", _litess2d_case),
    ("litess2d_forward_3x3", lambda r: _litess2d_case(r, lite=False)),
])


def run_gradcheck(name: str, seed: int = 0):
    if name not in GRADCHECK_CASES:
        raise KeyError(f"unknown gradcheck case {name!r}; known: {', '.join(GRADCHECK_CASES)}")
    rng = np.random.default_rng(seed)
    fn, inputs, tol = GRADCHECK_CASES[name](rng)
    return grad_check(fn, inputs, eps=1e-6, tol=tol, seed=seed), tol


# ---------------------------------------------------------------------------
# self-test

def _check_scan_roundtrip():
    from .scan import scan_expand, scan_merge

    rng = np.random.default_rng(1)
    for _ in range(20):
        B, C, H, W = rng.integers(1, 4), rng.integers(1, 5), rng.integers(1, 7), rng.integers(1, 7)
        x = Tensor(rng.normal(size=(B, C, H, W)), dtype=np.float64)
        if not np.array_equal(scan_merge(scan_expand(x), H, W).data, 4 * x.data):
            return False, f"merge(expand(x)) != 4x at shape {(B, C, H, W)}"
    return True, "20 shapes bit-exact"


def _check_s6_oracle():
    from .scan import S6Params, s6_forward, s6_oracle

    rng = np.random.default_rng(2)
    worst = {np.float64: 0.0, np.float32: 0.0}
    for dt in worst:
        for _ in range(5):
            D, N, R, L = rng.integers(1, 6), rng.integers(1, 5), rng.integers(1, 3), rng.integers(1, 8)
            p = S6Params.init(D, N, R, 1, rng=rng, dtype=dt)
            x = Tensor(rng.normal(size=(2, D, L)).astype(dt))
            worst[dt] = max(worst[dt], float(np.abs(s6_forward(x, p).data - s6_oracle(x, p)).max()))
    ok = worst[np.float64] <= 1e-12 and worst[np.float32] <= 1e-5
    return ok, f"max diff f64 {worst[np.float64]:.2e}, f32 {worst[np.float32]:.2e}"


def _check_gradients():
    bad = []
    for name in GRADCHECK_CASES:
        rep, _ = run_gradcheck(name)
        if not rep.passed:
            bad.append(f"{name} {rep.max_rel_err:.2e}")
    return not bad, "all cases pass" if not bad else "; ".join(bad)


def _check_ledger_rows():
    from .accounting import count_params

    led = count_params("medmamba-t-baseline")
    got = (led.count("A_log_D"), led.count("s6_xproj_dt"), led.count("conv_branch"))
    return got == (248064, 946944, 36480), f"A_log_D/x_proj+dt/conv = {got}"


def _check_registry_agreement():
    from .accounting import ROWS, count_flops, count_params, instrumented_macs, registry_ledger
    from .config import PRESETS
    from .model import build_model

    for name in ("lite-st-tiny", "medmamba-t-baseline-tiny"):
        for flags in ((True, True), (True, False), (False, True), (False, False)):
            cfg = PRESETS[name].replace(share_scan_directions=flags[0], share_AD_per_stage=flags[1])
            m = build_model(cfg, seed=0)
            reg, led = registry_ledger(m), count_params(cfg)
            if any(reg.count(r) != led.count(r) for r in ROWS):
                return False, f"{name} {flags}: registry {reg.rows} vs ledger {led.rows}"
            if instrumented_macs(m).total != count_flops(cfg)["full_model"].macs:
                return False, f"{name} {flags}: instrumented MACs differ from ledger"
    return True, "registry and MAC counts match the ledger for 8 configurations"


def _check_checkpoint():
    from .checkpoint import checkpoint_bytes, model_from_bytes
    from .config import PRESETS
    from .model import build_model

    m = build_model(PRESETS["lite-st-tiny"], seed=5)
    b = checkpoint_bytes(m)
    m2 = model_from_bytes(b)
    same = checkpoint_bytes(m2) == b and checkpoint_bytes(build_model(PRESETS["lite-st-tiny"], seed=5)) == b
    shared = m2["stages.2.blocks.0.ssm.A_log"] is m2["stages.2.blocks.1.ssm.A_log"]
    return same and shared, f"{len(b)} bytes, idempotent={same}, aliases shared={shared}"


def _check_shuffle():
    from .model import channel_shuffle

    rng = np.random.default_rng(3)
    x = Tensor(rng.normal(size=(2, 12, 2, 2)), dtype=np.float64)
    y = channel_shuffle(channel_shuffle(x, 3), 4)
    return bool(np.array_equal(y.data, x.data)), "shuffle(g) then shuffle(C/g) is identity"


def _check_kd():
    from .distill import kd_loss

    rng = np.random.default_rng(4)
    s = Tensor(rng.normal(size=(6, 5)), dtype=np.float64)
    labels = rng.integers(0, 5, size=6)
    ce = ops.cross_entropy(s, labels).item()
    a1 = kd_loss(s, rng.normal(size=(6, 5)), labels, alpha=1.0).item()
    same = kd_loss(s, s.data, labels, alpha=0.5, T=3.0).item()
    ok = a1 == ce and abs(same - 0.5 * ce) < 1e-12
    return ok, f"alpha=1 gives CE exactly; identical teacher gives alpha*CE ({same:.6f})"


def _check_fit():
    from .accounting import count_params, memory_fit

    got = (memory_fit(count_params("lite-st"), "orin-nano").level,
           memory_fit(count_params("lite-tr"), "orin-nano").level,
           memory_fit(count_params("medmamba-t-baseline"), "orin-nano").level,
           memory_fit(count_params("medmamba-t-baseline"), "rpi5").level)
    return got == ("L2", "DRAM", "DRAM", "DRAM"), f"levels {got}"


SELFTESTS = OrderedDict([
    ("scan expand/merge", _check_scan_roundtrip),
    ("s6 vs scalar oracle", _check_s6_oracle),
    ("gradient checks", _check_gradients),
    ("baseline ledger rows", _check_ledger_rows),
    ("ledger/registry/MAC agreement", _check_registry_agreement),
    ("checkpoint round trip", _check_checkpoint),
    ("channel shuffle inverse", _check_shuffle),
    ("distillation loss", _check_kd),
    ("cache fit levels", _check_fit),
])


def selftest(log=print) -> bool:
    ok_all = True
    for name, fn in SELFTESTS.items():
        t0 = time.perf_counter()
        try:
            ok, detail = fn()
        except Exception as exc:  # report and keep going
            ok, detail = False, f"{type(exc).__name__}: {exc}"
        ok_all &= ok
        log(f"[{'PASS' if ok else 'FAIL'}] {name}: {detail} ({time.perf_counter() - t0:.1f}s)")
    return ok_all


__all__ = ["GRADCHECK_CASES", "SELFTESTS", "run_gradcheck", "selftest", "small_litess2d"]
