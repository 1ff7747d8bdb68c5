import itertools
from fractions import Fraction

import numpy as np
import pytest
from hypothesis import given
from hypothesis import strategies as st

from mmlite.accounting import (DEVICES, PART_ROWS, ROWS, DeviceProfile, compare_savings, count_flops, count_params,
                               instrumented_macs, ledger_csv, ledger_table, memory_fit, parse_device_text,
                               parse_ledger_csv, registry_ledger, resolve_device, sharing_factors)
from mmlite.config import PRESETS
from mmlite.errors import ConfigError
from mmlite.model import build_model
from mmlite.tensor import Tensor, count_macs, ops

MIB = 1024 * 1024
FLAGS = list(itertools.product([False, True], repeat=2))


def test_baseline_rows_exact():
    led = count_params("medmamba-t-baseline")
    assert led.count("A_log_D") == 248_064
    assert led.count("s6_xproj_dt") == 946_944
    assert led.count("conv_branch") == 36_480


@pytest.mark.parametrize("name", sorted(PRESETS))
def test_rows_sum_and_bytes(name):
    led = count_params(name)
    assert led.count("full_model") == sum(led.count(r) for r in PART_ROWS)
    for r in ROWS:
        assert led[r].bytes_f32 == 4 * led.count(r)
    fl = count_flops(name)
    assert fl["full_model"].macs == sum(fl[r].macs for r in PART_ROWS)
    assert fl["full_model"].flops == 2 * fl["full_model"].macs


@pytest.mark.parametrize("name", sorted(PRESETS))
@pytest.mark.parametrize("dirs,stage", FLAGS)
def test_ledger_matches_registry(name, dirs, stage):
    cfg = PRESETS[name].replace(share_scan_directions=dirs, share_AD_per_stage=stage)
    m = build_model(cfg, seed=0)
    reg, led = registry_ledger(m), count_params(cfg)
    assert {r: reg.count(r) for r in ROWS} == {r: led.count(r) for r in ROWS}
    assert m.num_parameters() == led.count("full_model")


@pytest.mark.parametrize("name", ["lite-st-tiny", "lite-tr-tiny", "medmamba-t-baseline-tiny"])
@pytest.mark.parametrize("dirs,stage", FLAGS)
def test_executed_macs_match_ledger(name, dirs, stage):
    cfg = PRESETS[name].replace(share_scan_directions=dirs, share_AD_per_stage=stage)
    assert instrumented_macs(build_model(cfg, seed=0)).total == count_flops(cfg)["full_model"].macs


def test_sharing_does_not_reduce_flops():
    base = PRESETS["lite-st-tiny"]
    macs = {f: count_flops(base.replace(share_scan_directions=f[0], share_AD_per_stage=f[1]))["full_model"].macs
            for f in FLAGS}
    assert len(set(macs.values())) == 1


def test_pointwise_flop_example():
    x = Tensor(np.zeros((1, 2, 4, 4)))
    with count_macs() as c:
        ops.pointwise_conv2d(x, Tensor(np.zeros((3, 2))))
    assert 2 * c.total == 192


@pytest.mark.parametrize("name", ["lite-st", "lite-tr", "medmamba-t-baseline"])
def test_conv_row_scales_with_pixels(name):
    a, b = count_flops(name, (64, 64)), count_flops(name, (128, 128))
    assert b["conv_branch"].macs == 4 * a["conv_branch"].macs
    assert b["A_log_D"].macs == 4 * a["A_log_D"].macs


def test_lite_flops_ratio_reported():
    tr, st_ = count_flops("lite-tr", (224, 224)), count_flops("lite-st", (224, 224))
    ratio = tr["full_model"].macs / st_["full_model"].macs
    assert 1 < ratio < 10


def test_savings_examples():
    a = count_params("lite-st")
    assert all(s.percent == 0 and s.ratio == 1 for s in compare_savings(a, a).values())
    base = PRESETS["medmamba-t-baseline"]
    dirs = count_params(base.replace(share_scan_directions=True))
    s = compare_savings(count_params(base), dirs)
    assert s["s6_xproj_dt"].ratio == 4.0
    assert abs(s["s6_xproj_dt"].percent - 75.0) < 1e-12
    full = compare_savings(count_params(base), count_params("lite-st"))["full_model"].percent
    assert 90 < full < 100


def test_savings_zero_denominator():
    led = count_params("lite-st")
    zero = count_params("lite-st")
    zero.rows["conv_branch"] = type(zero.rows["conv_branch"])(0)
    s = compare_savings(led, zero)
    assert s["conv_branch"].ratio is None and not s["conv_branch"].defined
    assert "undefined" in str(s["conv_branch"])
    assert compare_savings(zero, led)["conv_branch"].percent is None


def test_sharing_factors_exact():
    f = sharing_factors("medmamba-t-baseline")
    assert f.direction == 4
    assert f.per_stage == Fraction(3648, 1440)
    assert any("remainder" in line for line in f.lines())


def test_lite_ledger_carries_gap_notes():
    led = count_params("lite-tr")
    assert led.notes and any("s6_xproj_dt" in n or "x_proj" in n for n in led.notes)


def test_ordering_of_presets():
    p = {n: count_params(n).count("full_model") for n in ("lite-st", "lite-tr", "medmamba-t-baseline")}
    f = {n: count_flops(n)["full_model"].macs for n in p}
    assert p["lite-st"] < p["lite-tr"] < p["medmamba-t-baseline"]
    assert f["lite-st"] < f["lite-tr"] < f["medmamba-t-baseline"]


# --- export ------------------------------------------------------------------

def test_csv_round_trip():
    params, flops = count_params("lite-st"), count_flops("lite-st")
    text = ledger_csv(params, flops, count_params("medmamba-t-baseline"))
    recs = parse_ledger_csv(text)
    assert [r["row"] for r in recs] == list(ROWS)
    for r in recs:
        assert r["params"] == params.count(r["row"]) and r["macs"] == flops[r["row"]].macs
        assert r["size_bytes"] == 4 * r["params"] and r["flops"] == 2 * r["macs"]
    assert recs[0]["saving_percent"] > 90


def test_table_column_order():
    text = ledger_table(count_params("lite-st"), count_flops("lite-st"))
    head = next(line for line in text.splitlines() if line.startswith("Block"))
    assert head.index("Params") < head.index("Size") < head.index("FLOPs") < head.index("Saving")
    assert "Full model" in text and "1 MAC = 2 FLOPs" in text


# --- devices -------------------------------------------------------------------

def test_fit_examples():
    orin, rpi = DEVICES["orin-nano"], DEVICES["rpi5"]
    assert memory_fit(int(2.4 * MIB), orin).level == "L2"
    assert memory_fit(int(9.0 * MIB), orin).level == "DRAM"
    assert memory_fit(int(55.2 * MIB), rpi).level == "DRAM"
    assert memory_fit(count_params("lite-st"), orin).level == "L2"
    assert str(memory_fit(count_params("lite-st"), "orin-nano")).startswith("fits: L2")


@given(st.integers(1, 64 * MIB), st.sampled_from(sorted(DEVICES)))
def test_fit_report_invariants(nbytes, dev):
    rep = memory_fit(nbytes, dev)
    levels = DEVICES[dev].levels()
    names = [n for n, _ in levels]
    i = names.index(rep.level)
    assert rep.capacity >= nbytes or rep.level == "DRAM"
    if i > 0:
        assert levels[i - 1][1] < nbytes
    assert rep.slack_bytes == rep.capacity - nbytes


@given(st.integers(1, 32 * MIB), st.integers(64, 4096), st.integers(1, 4))
def test_fit_monotone_in_capacity(nbytes, l2, grow):
    small = DeviceProfile("a", 64, l2, l2 * 2, 1024)
    big = DeviceProfile("b", 64 * grow, l2 * grow, l2 * 2 * grow, 1024 * grow)
    order = ["L1", "L2", "L3/SLC", "DRAM"]
    assert order.index(memory_fit(nbytes, big).level) <= order.index(memory_fit(nbytes, small).level)


def test_device_file(tmp_path):
    f = tmp_path / "dev.txt"
    f.write_text("name=board\nl1_kb=64\nl2_kb=1024\nl3_or_slc_kb=none\ndram_mb=2048\n")
    dev = resolve_device(str(f))
    assert [n for n, _ in dev.levels()] == ["L1", "L2", "DRAM"]
    with pytest.raises(ConfigError):
        parse_device_text("l1_kb=64\nl2_kb=32\ndram_mb=1\n")
    with pytest.raises(ConfigError):
        parse_device_text("l1_kb=oops\n")
    with pytest.raises(ConfigError):
        resolve_device("no-such-board")
