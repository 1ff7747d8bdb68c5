"""Parameter, FLOP and size ledgers computed from a config, plus cache-fit reports.

Counts are closed-form over :class:`ModelConfig`; :func:`registry_ledger` and
:func:`instrumented_macs` give independent routes through a built model.

Rows:

* ``conv_branch``  depthwise convolutions inside the scan branch
* ``s6_xproj_dt``  ``x_proj`` weights and the ``dt`` bias
* ``A_log_D``      state decay parameters and feedthrough
* ``other``        everything else (local branch, projections, norms, stem, merges, head)

FLOP convention: one multiply-accumulate is two FLOPs. Ledgers carry both.
Sizes are f32 bytes; human-readable sizes use MiB, printing sub-MiB values as
thousandths of a MiB labelled ``kB``.
"""
from __future__ import annotations

import csv
import io
from collections import OrderedDict
from dataclasses import dataclass, field
from fractions import Fraction
from pathlib import Path
from typing import Optional, Union

from .config import ModelConfig, PRESETS, resolve_config
from .errors import ConfigError

ROWS = ("full_model", "conv_branch", "s6_xproj_dt", "A_log_D", "other")
PART_ROWS = ROWS[1:]
N_EXEC_DIRECTIONS = 4
MIB = 1024 * 1024

# Reference component figures: params, f32 size in bytes, FLOPs column (read as MACs).
REFERENCE = {
    "medmamba-t-baseline": {
        "full_model": (14.5e6, 55.2 * MIB, 2.3e9),
        "conv_branch": (36.5e3, 0.1392 * MIB, 11.5e6),
        "s6_xproj_dt": (946.9e3, 3.6 * MIB, 236.0e6),
        "A_log_D": (248.1e3, 0.9463 * MIB, 163.8e6),
    },
    "lite-tr": {
        "full_model": (2.4e6, 9.0 * MIB, 475.2e6),
        "conv_branch": (19.5e3, 0.0742 * MIB, 5.1e6),
        "s6_xproj_dt": (132.0e3, 0.5034 * MIB, 141.3e6),
        "A_log_D": (41.3e3, 0.1577 * MIB, 109.2e6),
    },
    "lite-st": {
        "full_model": (635.4e3, 2.4 * MIB, 154.1e6),
        "conv_branch": (9.7e3, 0.0371 * MIB, 2.6e6),
        "s6_xproj_dt": (53.1e3, 0.2024 * MIB, 62.6e6),
        "A_log_D": (20.7e3, 0.0789 * MIB, 54.6e6),
    },
}
REFERENCE_SAVINGS = {
    "lite-tr": {"full_model": 83.6, "conv_branch": 46.6, "s6_xproj_dt": 86.1, "A_log_D": 83.3},
    "lite-st": {"full_model": 95.9, "conv_branch": 73.4, "s6_xproj_dt": 94.4, "A_log_D": 91.7},
}
REFERENCE_TOLERANCE = {"medmamba-t-baseline": 0.10, "lite-tr": 0.25, "lite-st": 0.25}
REPORTED_XPROJ_FACTOR = 7.2
REPORTED_AD_FACTOR = 6.0

_NARROW_NOTE = ("component rows are reproduced by preset lite-tr-narrow (dims [64,128,256,512], direction "
                "sharing, A_log/D per block): conv 19,456, x_proj+dt 131,968, A_log/D 41,344, full 2,406,466 "
                "params; MACs 5.1M, 141.3M, 109.2M")
KNOWN_GAPS = {
    "lite-tr": [
        "the [96,192,384,768] dims with per-stage A_log/D cannot reach the reference rows: conv_branch and "
        "A_log_D both imply sum(d_inner) = 2432 per block set, not 3648",
        _NARROW_NOTE,
        "other row: patch merging and scan in/out projections at [96..768] width carry the full-model excess",
    ],
    "lite-tr-narrow": [_NARROW_NOTE],
    "lite-st": [
        "A_log_D reference 20.7k matches one A_log/D set per block (20,672, preset lite-st-perblock); this "
        "preset shares per stage (8,160); the A_log_D MACs match the executed scan exactly",
        "other row MACs exceed the reference: scan in/out projections alone are 48.2M at 224x224",
    ],
    "lite-st-perblock": [
        "other row MACs exceed the reference: scan in/out projections alone are 48.2M at 224x224",
    ],
    "medmamba-t-baseline": [
        "local branch uses two dense 3x3 convs with norms and a pointwise conv; this carries "
        "most of the remaining full-model mass outside the three component rows",
    ],
}
REFERENCE["lite-tr-narrow"] = REFERENCE["lite-tr"]
REFERENCE["lite-st-perblock"] = REFERENCE["lite-st"]
REFERENCE_TOLERANCE.update({"lite-tr-narrow": 0.25, "lite-st-perblock": 0.25})


# ---------------------------------------------------------------------------
# closed-form itemisation

def _items(cfg: ModelConfig, resolution=None):
    """Yield ``(row, component, params, macs)`` for one forward pass at batch 1."""
    res = tuple(resolution or cfg.input_resolution)
    cfg.replace(input_resolution=res).validate()
    p, cin, d1 = cfg.patch_size, cfg.in_channels, cfg.stage_dims[0]
    H0, W0 = cfg.stage_resolution(0, res)
    yield "other", "stem", d1 * cin * p * p + 3 * d1, H0 * W0 * d1 * cin * p * p

    K, N = cfg.directions, cfg.state_size
    max_di = max(cfg.d_inner(s) for s in range(4))
    if cfg.share_AD_global:
        yield "A_log_D", "A_log/D (global)", K * (N + 1) * max_di, 0
    for s, (dim, depth) in enumerate(zip(cfg.stage_dims, cfg.stage_depths)):
        H, W = cfg.stage_resolution(s, res)
        L = H * W
        c, Di, R = cfg.branch_width(s), cfg.d_inner(s), cfg.rank(s)
        if cfg.share_AD_per_stage and not cfg.share_AD_global:
            yield "A_log_D", "A_log/D (per stage)", K * (N + 1) * Di, 0
        for _ in range(depth):
            if cfg.lite_conv_branch:
                yield "other", "local branch", 8 * c + c * c, L * (6 * c + c * c)
                yield "conv_branch", "scan depthwise 3x1+1x3", 8 * Di, 6 * L * Di
            else:
                yield "other", "local branch", 2 * (9 * c * c + 3 * c) + c * c + c, L * (18 * c * c + c * c)
                yield "conv_branch", "scan depthwise 3x3", 10 * Di, 9 * L * Di
            yield "other", "scan in/out projections", 2 * Di * c + c * Di, L * 3 * Di * c
            yield "other", "scan norms", 2 * c + 2 * Di, 0
            yield "s6_xproj_dt", "x_proj + dt bias", K * (Di * (R + 2 * N) + Di), \
                N_EXEC_DIRECTIONS * L * Di * (R + 2 * N)
            yield "other", "dt_proj weight", K * Di * R, N_EXEC_DIRECTIONS * L * Di * R
            yield "other", "feedthrough", 0, N_EXEC_DIRECTIONS * L * Di
            per_block = 0 if (cfg.share_AD_per_stage or cfg.share_AD_global) else K * (N + 1) * Di
            yield "A_log_D", "scan recurrence", per_block, 2 * N_EXEC_DIRECTIONS * L * Di * N
        if s < 3:
            Ho, Wo = cfg.stage_resolution(s + 1, res)
            yield "other", "patch merging", 8 * dim + 8 * dim * dim, Ho * Wo * 8 * dim * dim
    d4, nc = cfg.stage_dims[-1], cfg.num_classes
    yield "other", "head", 2 * d4 + nc * d4 + nc, d4 * nc


def breakdown(cfg: ModelConfig, resolution=None) -> "OrderedDict[str, tuple]":
    """Component -> (params, macs), summed over the network."""
    out: OrderedDict = OrderedDict()
    for _, comp, n, m in _items(cfg, resolution):
        a, b = out.get(comp, (0, 0))
        out[comp] = (a + n, b + m)
    return out


# ---------------------------------------------------------------------------
# ledgers

@dataclass(frozen=True)
class ParamRow:
    param_count: int

    @property
    def bytes_f32(self) -> int:
        return 4 * self.param_count


@dataclass
class ParamLedger:
    rows: "OrderedDict[str, ParamRow]"
    notes: list = field(default_factory=list)
    config_name: str = ""

    def __getitem__(self, row: str) -> ParamRow:
        return self.rows[row]

    def count(self, row: str) -> int:
        return self.rows[row].param_count


@dataclass(frozen=True)
class FlopRow:
    macs: int

    @property
    def flops(self) -> int:
        return 2 * self.macs


@dataclass
class FlopLedger:
    rows: "OrderedDict[str, FlopRow]"
    resolution: tuple
    notes: list = field(default_factory=list)
    config_name: str = ""

    def __getitem__(self, row: str) -> FlopRow:
        return self.rows[row]


def _sum_rows(cfg, resolution, index):
    acc = {r: 0 for r in PART_ROWS}
    for item in _items(cfg, resolution):
        acc[item[0]] += item[index]
    return OrderedDict([("full_model", sum(acc.values()))] + [(r, acc[r]) for r in PART_ROWS])


def _fmt_count(n: float) -> str:
    for div, unit in ((1e9, "G"), (1e6, "M"), (1e3, "k")):
        if abs(n) >= div:
            return f"{n / div:.1f} {unit}"
    return f"{n:.0f}"


def _fmt_size(nbytes: float) -> str:
    mib = nbytes / MIB
    return f"{mib:.1f} MB" if mib >= 1 else f"{mib * 1000:.1f} kB"


def _gap_notes(cfg: ModelConfig, counts, kind: str, index: int) -> list:
    key = cfg.name
    targets = REFERENCE.get(key)
    if targets is None:
        return []
    notes = []
    tol = REFERENCE_TOLERANCE[key]
    for row, values in targets.items():
        target = values[index]
        ours = counts[row]
        gap = ours / target - 1.0
        flag = "within" if abs(gap) <= tol else "OUTSIDE"
        notes.append(f"{kind} {row}: {ours:,} vs target {_fmt_count(target)} ({gap:+.1%}, {flag} +/-{tol:.0%})")
    return notes


def count_params(cfg: Union[ModelConfig, str]) -> ParamLedger:
    """Closed-form, alias-aware parameter counts per row."""
    cfg = resolve_config(cfg)
    counts = _sum_rows(cfg, None, 2)
    notes = _gap_notes(cfg, counts, "params", 0)
    if cfg.name in REFERENCE:
        parts = ", ".join(f"{c} {n:,}" for c, (n, _) in breakdown(cfg).items() if n)
        notes.append(f"params itemised: {parts}")
        notes.extend(KNOWN_GAPS.get(cfg.name, []))
    if cfg.share_AD_global:
        notes.append("A_log/D shared globally: one set at the widest d_inner, narrower stages use a prefix "
                     "(ledger-only, not buildable)")
    rows = OrderedDict((r, ParamRow(int(v))) for r, v in counts.items())
    return ParamLedger(rows, notes, cfg.name)


def count_flops(cfg: Union[ModelConfig, str], resolution=None) -> FlopLedger:
    """Closed-form executed multiply-accumulates per row for one image."""
    cfg = resolve_config(cfg)
    res = tuple(resolution or cfg.input_resolution)
    if isinstance(resolution, int):
        res = (resolution, resolution)
    counts = _sum_rows(cfg, res, 3)
    notes = ["1 MAC = 2 FLOPs; reference FLOPs figures agree with MAC counts"]
    if res == (224, 224) and cfg.name in REFERENCE:
        notes += _gap_notes(cfg, counts, "MACs", 2)
        parts = ", ".join(f"{c} {m:,}" for c, (_, m) in breakdown(cfg, res).items() if m)
        notes.append(f"MACs itemised: {parts}")
    rows = OrderedDict((r, FlopRow(int(v))) for r, v in counts.items())
    return FlopLedger(rows, res, notes, cfg.name)


def registry_ledger(model) -> ParamLedger:
    """Row counts from a built model's registry (each stored tensor once)."""
    acc = {r: 0 for r in PART_ROWS}
    for name, t in model.params.items():
        acc[row_of(name)] += t.size
    rows = OrderedDict([("full_model", ParamRow(sum(acc.values())))] +
                       [(r, ParamRow(acc[r])) for r in PART_ROWS])
    return ParamLedger(rows, [], model.config.name)


def row_of(name: str) -> str:
    """Ledger row for a registry parameter name."""
    if ".ssm.dw" in name:
        return "conv_branch"
    if name.endswith("x_proj.weight") or name.endswith("dt_proj.bias"):
        return "s6_xproj_dt"
    if name.endswith("A_log") or name.endswith(".D"):
        return "A_log_D"
    return "other"


def instrumented_macs(model, resolution=None):
    """Run one batch-1 forward under MAC counting; returns the counter."""
    import numpy as np

    from .model import model_forward
    from .tensor import Tensor, count_macs

    cfg = model.config
    H, W = resolution or cfg.input_resolution
    x = Tensor(np.zeros((1, cfg.in_channels, H, W), dtype=model.dtype))
    with count_macs() as counter:
        model_forward(model, x)
    return counter


# ---------------------------------------------------------------------------
# savings and sharing factors

@dataclass(frozen=True)
class Saving:
    ratio: Optional[float]
    percent: Optional[float]

    @property
    def defined(self) -> bool:
        return self.ratio is not None and self.percent is not None

    def __str__(self) -> str:
        r = "undefined" if self.ratio is None else f"{self.ratio:.3f}x"
        p = "undefined" if self.percent is None else f"{self.percent:.1f}%"
        return f"{r} ({p})"


def compare_savings(a: ParamLedger, b: ParamLedger) -> "OrderedDict[str, Saving]":
    """Per-row ``a/b`` ratio and ``(1 - b/a)*100`` saving; zero denominators give undefined entries."""
    if list(a.rows) != list(b.rows):
        raise ConfigError("ledgers have different row schemas")
    out = OrderedDict()
    for row in a.rows:
        x, y = _row_value(a.rows[row]), _row_value(b.rows[row])
        ratio = x / y if y else None
        percent = (1.0 - y / x) * 100.0 if x else None
        out[row] = Saving(ratio, percent)
    return out


def _row_value(r) -> int:
    return r.param_count if isinstance(r, ParamRow) else r.macs


@dataclass(frozen=True)
class SharingFactors:
    direction: Fraction
    per_stage: Fraction
    reported_direction: float = REPORTED_XPROJ_FACTOR
    reported_per_stage: float = REPORTED_AD_FACTOR

    @property
    def direction_remainder(self) -> float:
        return self.reported_direction / float(self.direction)

    @property
    def per_stage_remainder(self) -> float:
        return self.reported_per_stage / float(self.per_stage)

    def lines(self) -> list:
        return [
            f"direction sharing, s6_xproj_dt: {float(self.direction):.3f}x structural "
            f"({self.direction}); reported {self.reported_direction}x; unexplained remainder "
            f"{self.direction_remainder:.3f}x",
            f"per-stage A_log/D sharing, A_log_D: {float(self.per_stage):.3f}x structural "
            f"({self.per_stage}); reported {self.reported_per_stage}x; unexplained remainder "
            f"{self.per_stage_remainder:.3f}x",
            "candidate explanation, not assumed: the reference factors equal baseline rows over the "
            "lite-tr-narrow rows (946,944/131,968 = 7.18x, 248,064/41,344 = 6.00x)",
        ]


def sharing_factors(cfg: Union[ModelConfig, str] = "medmamba-t-baseline") -> SharingFactors:
    """Exact reduction factors from switching on each sharing mechanism alone."""
    base = resolve_config(cfg).replace(share_scan_directions=False, share_AD_per_stage=False,
                                       share_AD_global=False)
    plain = count_params(base)
    dirs = count_params(base.replace(share_scan_directions=True))
    stage = count_params(base.replace(share_AD_per_stage=True))
    return SharingFactors(Fraction(plain.count("s6_xproj_dt"), dirs.count("s6_xproj_dt")),
                          Fraction(plain.count("A_log_D"), stage.count("A_log_D")))


# ---------------------------------------------------------------------------
# export

LABELS = {"full_model": "Full model", "conv_branch": "Conv branch", "s6_xproj_dt": "S6 x_proj+dt",
          "A_log_D": "A_log + D", "other": "Other"}
CSV_FIELDS = ["row", "params", "size_bytes", "macs", "flops", "saving_percent"]


def _savings_for(params: ParamLedger, reference: Optional[ParamLedger]):
    if reference is None:
        return {r: None for r in params.rows}
    return {r: s.percent for r, s in compare_savings(reference, params).items()}


def ledger_csv(params: ParamLedger, flops: FlopLedger, reference: Optional[ParamLedger] = None) -> str:
    """CSV in reference column order: params, size, FLOPs, saving."""
    saving = _savings_for(params, reference)
    buf = io.StringIO()
    w = csv.writer(buf, lineterminator="\n")
    w.writerow(CSV_FIELDS)
    for row in ROWS:
        pct = saving[row]
        w.writerow([row, params[row].param_count, params[row].bytes_f32, flops[row].macs, flops[row].flops,
                    "" if pct is None else repr(round(pct, 6))])
    return buf.getvalue()


def parse_ledger_csv(text: str) -> list:
    out = []
    for rec in csv.DictReader(io.StringIO(text)):
        out.append({"row": rec["row"], "params": int(rec["params"]), "size_bytes": int(rec["size_bytes"]),
                    "macs": int(rec["macs"]), "flops": int(rec["flops"]),
                    "saving_percent": float(rec["saving_percent"]) if rec["saving_percent"] else None})
    return out


def ledger_table(params: ParamLedger, flops: FlopLedger, reference: Optional[ParamLedger] = None) -> str:
    saving = _savings_for(params, reference)
    head = f"{'Block':<14}{'Params':>12}{'Size':>12}{'FLOPs':>12}{'Saving (%)':>12}"
    lines = [f"{params.config_name} @ {flops.resolution[0]}x{flops.resolution[1]}", head, "-" * len(head)]
    for row in ROWS:
        pct = saving[row]
        lines.append(f"{LABELS[row]:<14}{params[row].param_count:>12,}{_fmt_size(params[row].bytes_f32):>12}"
                     f"{_fmt_count(flops[row].macs):>12}{'-' if pct is None else f'{pct:.1f}':>12}")
    lines.append("FLOPs column counts multiply-accumulates; 1 MAC = 2 FLOPs (full model "
                 f"{flops['full_model'].flops:,} FLOPs)")
    lines += [f"note: {n}" for n in params.notes + flops.notes]
    return "\n".join(lines) + "\n"


# ---------------------------------------------------------------------------
# device profiles and cache fit

@dataclass(frozen=True)
class DeviceProfile:
    """Memory hierarchy capacities; cache sizes in KiB, DRAM in MiB.

    Levels must not shrink going outward. Equal adjacent capacities are allowed
    (a shared L2 and a system cache of the same size).
    """

    name: str
    l1_kb: int
    l2_kb: int
    l3_or_slc_kb: Optional[int]
    dram_mb: int

    def __post_init__(self):
        caps = [c for _, c in self.levels()]
        if any(c <= 0 for c in caps):
            raise ConfigError(f"device {self.name}: capacities must be positive")
        if any(b < a for a, b in zip(caps, caps[1:])):
            raise ConfigError(f"device {self.name}: capacities must not decrease across levels")

    def levels(self) -> list:
        out = [("L1", self.l1_kb * 1024), ("L2", self.l2_kb * 1024)]
        if self.l3_or_slc_kb:
            out.append(("L3/SLC", self.l3_or_slc_kb * 1024))
        out.append(("DRAM", self.dram_mb * MIB))
        return out


DEVICES = {
    "orin-nano": DeviceProfile("orin-nano", l1_kb=192, l2_kb=4096, l3_or_slc_kb=4096, dram_mb=8192),
    "rpi5": DeviceProfile("rpi5", l1_kb=128, l2_kb=512, l3_or_slc_kb=2048, dram_mb=16384),
}


def parse_device_text(text: str) -> DeviceProfile:
    vals, errors = {}, []
    keys = ("name", "l1_kb", "l2_kb", "l3_or_slc_kb", "dram_mb")
    for lineno, raw in enumerate(text.splitlines(), 1):
        line = raw.split("#", 1)[0].strip()
        if not line:
            continue
        key, sep, value = (s.strip() for s in line.partition("="))
        if not sep or key not in keys:
            errors.append(f"line {lineno}: expected one of {', '.join(keys)} as key=value")
            continue
        if key == "name":
            vals[key] = value
        else:
            try:
                vals[key] = int(value) if value.lower() not in ("", "none", "0") else None
            except ValueError:
                errors.append(f"line {lineno}: {key} must be an integer")
    missing = [k for k in ("l1_kb", "l2_kb", "dram_mb") if vals.get(k) is None]
    if missing and not errors:
        errors.append(f"missing keys: {', '.join(missing)}")
    if errors:
        raise ConfigError(errors)
    vals.setdefault("name", "custom")
    vals.setdefault("l3_or_slc_kb", None)
    return DeviceProfile(**vals)


def resolve_device(spec: Union[str, Path, DeviceProfile]) -> DeviceProfile:
    if isinstance(spec, DeviceProfile):
        return spec
    if str(spec) in DEVICES:
        return DEVICES[str(spec)]
    path = Path(spec)
    if not path.is_file():
        raise ConfigError(f"{spec!r} is neither a bundled device ({', '.join(DEVICES)}) nor a profile file")
    return parse_device_text(path.read_text())


@dataclass(frozen=True)
class FitReport:
    device: str
    model_bytes: int
    level: str
    capacity: int

    @property
    def slack_bytes(self) -> int:
        return self.capacity - self.model_bytes

    def __str__(self) -> str:
        return (f"fits: {self.level}\nmodel bytes (f32): {self.model_bytes:,} ({_fmt_size(self.model_bytes)})\n"
                f"{self.level} capacity on {self.device}: {self.capacity:,}\nslack bytes: {self.slack_bytes:,}")


def memory_fit(ledger: Union[ParamLedger, int], dev: Union[DeviceProfile, str]) -> FitReport:
    """Smallest level holding all f32 weights; falls back to DRAM even when it overflows."""
    dev = resolve_device(dev)
    nbytes = ledger["full_model"].bytes_f32 if isinstance(ledger, ParamLedger) else int(ledger)
    levels = dev.levels()
    for name, cap in levels:
        if cap >= nbytes:
            return FitReport(dev.name, nbytes, name, cap)
    name, cap = levels[-1]
    return FitReport(dev.name, nbytes, name, cap)


__all__ = [
    "DEVICES", "DeviceProfile", "FitReport", "FlopLedger", "FlopRow", "KNOWN_GAPS", "PRESETS", "ParamLedger",
    "ParamRow", "ROWS", "Saving", "SharingFactors", "REFERENCE", "breakdown", "compare_savings", "count_flops",
    "count_params", "instrumented_macs", "ledger_csv", "ledger_table", "memory_fit", "parse_device_text",
    "parse_ledger_csv", "registry_ledger", "resolve_device", "row_of", "sharing_factors",
]
