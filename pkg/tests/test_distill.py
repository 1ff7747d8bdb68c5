import math

import numpy as np
import pytest
from hypothesis import given
from hypothesis import strategies as st

from mmlite.config import PRESETS
from mmlite.data import Dataset, DatasetSpec, dataset_bytes, dataset_from_bytes, read_dataset, synth_dataset, \
    write_dataset
from mmlite.distill import SGD, distill_run, evaluate, kd_loss, parse_report_csv, predict_logits, train, train_step
from mmlite.errors import ConfigError, ContractError, FormatError, TrainingError
from mmlite.model import build_model, model_forward, registry_bytes
from mmlite.tensor import Tape, Tensor, ops


@pytest.fixture(scope="module")
def small_ds():
    return synth_dataset(DatasetSpec(num_classes=8, samples_per_class=12, seed=7))


# --- dataset -------------------------------------------------------------------

def test_dataset_deterministic(tmp_path):
    spec = DatasetSpec(num_classes=8, samples_per_class=64, resolution=(32, 32), seed=7)
    a = write_dataset(synth_dataset(spec), tmp_path / "a.mmds").read_bytes()
    b = write_dataset(synth_dataset(spec), tmp_path / "b.mmds").read_bytes()
    assert a == b
    assert a != dataset_bytes(synth_dataset(DatasetSpec(samples_per_class=64, seed=8)))


def test_dataset_moments(small_ds):
    x = small_ds.images.astype(np.float64).reshape(len(small_ds.images), -1)
    np.testing.assert_allclose(x.mean(axis=1), 0, atol=1e-3)
    np.testing.assert_allclose(x.var(axis=1), 1, atol=1e-3)


def test_dataset_balanced_and_split(small_ds):
    _, ytr = small_ds.split("train")
    _, yva = small_ds.split("val")
    assert np.all(np.bincount(ytr, minlength=8) == 8) and np.all(np.bincount(yva, minlength=8) == 4)
    assert len(small_ds.split("all")[1]) == 96
    with pytest.raises(ContractError):
        small_ds.split("test")


def test_class_means_differ_in_blob_location():
    ds = synth_dataset(DatasetSpec(num_classes=8, samples_per_class=40, seed=7))
    x, y = ds.split("all")
    peak = []
    for k in (0, 1):
        mean = x[y == k].mean(axis=(0, 1))
        peak.append(np.unravel_index(mean.argmax(), mean.shape))
    assert peak[0] != peak[1]


def test_dataset_file_round_trip(tmp_path, small_ds):
    ds = read_dataset(write_dataset(small_ds, tmp_path / "d.mmds"))
    assert np.array_equal(ds.images, small_ds.images) and np.array_equal(ds.labels, small_ds.labels)
    assert ds.n_train == small_ds.n_train and ds.num_classes == 8


def test_dataset_format_errors(small_ds):
    buf = dataset_bytes(small_ds)
    with pytest.raises(FormatError):
        dataset_from_bytes(b"XXXX" + buf[4:])
    with pytest.raises(FormatError):
        dataset_from_bytes(buf[:-1])
    with pytest.raises(ContractError):
        DatasetSpec(num_classes=0).validate()


# --- kd loss ---------------------------------------------------------------------

def kd_reference(s, t, labels, T, alpha):
    total = 0.0
    for i in range(len(labels)):
        zs = [v for v in s[i]]
        lse = math.log(sum(math.exp(v) for v in zs))
        ce = lse - zs[labels[i]]
        qs = [v / T for v in zs]
        qt = [v / T for v in t[i]]
        lq = math.log(sum(math.exp(v) for v in qs))
        lt = math.log(sum(math.exp(v) for v in qt))
        kl = sum(math.exp(b - lt) * ((b - lt) - (a - lq)) for a, b in zip(qs, qt))
        total += alpha * ce + (1 - alpha) * T * T * kl
    return total / len(labels)


@given(st.integers(1, 6), st.integers(2, 6), st.floats(0.5, 8.0), st.floats(0.0, 1.0), st.integers(0, 2**31 - 1))
def test_kd_loss_matches_scalar_formula(B, K, T, alpha, seed):
    r = np.random.default_rng(seed)
    s, t = r.normal(size=(B, K)) * 3, r.normal(size=(B, K)) * 3
    labels = r.integers(0, K, size=B)
    got = kd_loss(Tensor(s), t, labels, T=T, alpha=alpha).item()
    assert abs(got - kd_reference(s, t, labels, T, alpha)) < 1e-10


def test_kd_alpha_one_is_ce():
    r = np.random.default_rng(0)
    s = Tensor(r.normal(size=(4, 3)))
    labels = np.array([0, 1, 2, 0])
    assert kd_loss(s, r.normal(size=(4, 3)), labels, alpha=1.0).item() == ops.cross_entropy(s, labels).item()
    assert kd_loss(s, None, labels, alpha=1.0).item() == ops.cross_entropy(s, labels).item()


def test_kd_identical_teacher_has_no_kl_gradient():
    r = np.random.default_rng(1)
    z = r.normal(size=(5, 4))
    labels = r.integers(0, 4, size=5)
    grads = []
    for fn in (lambda s: kd_loss(s, z, labels, T=3.0, alpha=0.4), lambda s: ops.scale(ops.cross_entropy(s, labels), 0.4)):
        s = Tensor(z.copy(), requires_grad=True)
        with Tape() as tape:
            loss = fn(s)
        tape.backward(loss)
        grads.append((loss.item(), s.grad))
    assert abs(grads[0][0] - grads[1][0]) < 1e-12
    np.testing.assert_allclose(grads[0][1], grads[1][1], atol=1e-12)


def test_kd_contract_errors():
    s = Tensor(np.zeros((2, 3)))
    with pytest.raises(ContractError):
        kd_loss(s, np.zeros((2, 3)), [0, 1], T=0)
    with pytest.raises(ContractError):
        kd_loss(s, np.zeros((2, 3)), [0, 1], alpha=1.5)
    with pytest.raises(ContractError):
        kd_loss(s, np.zeros((2, 4)), [0, 1], alpha=0.5)
    with pytest.raises(ContractError):
        kd_loss(s, np.zeros((2, 3)), [0, 1, 2])


# --- optimisation --------------------------------------------------------------

def test_lr_zero_leaves_parameters_identical(small_ds):
    m = build_model(PRESETS["lite-st-tiny"], seed=0)
    before = registry_bytes(m)
    x, y = small_ds.split("train")
    opt = SGD(m, lr=0.0)
    train_step(m, x[:8], y[:8], opt)
    assert registry_bytes(m) == before


def test_single_sample_overfit(small_ds):
    m = build_model(PRESETS["lite-st-tiny"], seed=0)
    x, y = small_ds.split("train")
    opt = SGD(m, lr=0.05, weight_decay=0.0, total_steps=10**9)
    losses = [train_step(m, x[:1], y[:1], opt) for _ in range(200)]
    final = ops.cross_entropy(model_forward(m, Tensor(x[:1])), y[:1]).item()
    assert final < 0.01, losses[-5:]


def _tied_pair(seed=0):
    """A per-stage-shared toy and an unshared twin whose tied tensors start equal."""
    cfg = PRESETS["lite-st-tiny"].replace(stage_depths=(1, 1, 2, 1))
    shared = build_model(cfg, seed=seed, dtype=np.float64)
    free = build_model(cfg.replace(share_AD_per_stage=False), seed=seed, dtype=np.float64)
    for name in free.params:
        free.params[name].data[...] = shared[name].data
    groups = {}
    for s, depth in enumerate(cfg.stage_depths):
        for key in ("A_log", "D"):
            groups[f"stages.{s}.{key}"] = [f"stages.{s}.blocks.{b}.ssm.{key}" for b in range(depth)]
    return shared, free, groups


def _grads(m, x, y):
    for t in m.parameters():
        t.grad = None
    with Tape() as tape:
        loss = ops.cross_entropy(model_forward(m, Tensor(x)), y)
    tape.backward(loss)


def test_shared_gradient_is_sum_of_block_gradients(small_ds):
    shared, free, groups = _tied_pair()
    x, y = small_ds.split("train")
    x = x[:4].astype(np.float64)
    _grads(shared, x, y[:4])
    _grads(free, x, y[:4])
    for canon, members in groups.items():
        total = sum(free.params[n].grad for n in members)
        np.testing.assert_allclose(shared.params[canon].grad, total, atol=1e-12)
        assert len(members) == 1 or np.abs(free.params[members[0]].grad - total).max() > 0


def test_aliased_updates_equal_tied_training(small_ds):
    shared, free, groups = _tied_pair(seed=1)
    x, y = small_ds.split("train")
    xs = x[:8].astype(np.float64)
    opt_s, opt_f = SGD(shared, lr=0.05, total_steps=5), SGD(free, lr=0.05, total_steps=5)
    for step in range(5):
        sl = slice(step, step + 4)
        _grads(shared, xs[sl], y[sl])
        opt_s.step()
        _grads(free, xs[sl], y[sl])
        for members in groups.values():
            total = sum(free.params[n].grad for n in members)
            for n in members:
                free.params[n].grad = total.copy()
        opt_f.step()
    for name in free.params:
        np.testing.assert_allclose(free.params[name].data, shared[name].data, atol=1e-10, rtol=0)


@pytest.mark.filterwarnings("ignore::RuntimeWarning")
def test_training_error_reports_diagnostics(small_ds):
    m = build_model(PRESETS["lite-st-tiny"], seed=0)
    x, y = small_ds.split("train")
    m["head.proj.weight"].data[...] = 1e38
    with pytest.raises(TrainingError, match="lr"):
        train_step(m, x[:2], y[:2], SGD(m))


# --- evaluation --------------------------------------------------------------------

def test_evaluate_chance_level_and_purity():
    ds = synth_dataset(DatasetSpec(num_classes=8, samples_per_class=64, seed=7))
    m = build_model(PRESETS["lite-st-tiny"], seed=11)
    acc, loss = evaluate(m, ds, "all")
    assert len(ds.labels) >= 512 and abs(acc - 1 / 8) <= 0.1 and math.isfinite(loss)
    assert evaluate(m, ds, "all") == (acc, loss)
    logits = predict_logits(m, ds.split("all")[0])
    assert float((logits.argmax(1) == ds.split("all")[1]).mean()) == acc


def test_evaluate_empty_split(small_ds):
    ds = Dataset(small_ds.images, small_ds.labels, 8, len(small_ds.labels))
    with pytest.raises(ContractError):
        evaluate(build_model(PRESETS["lite-st-tiny"]), ds, "val")


# --- loops -----------------------------------------------------------------------

def test_train_report_and_determinism(tmp_path, small_ds):
    runs = []
    for _ in range(2):
        m = build_model(PRESETS["lite-st-tiny"], seed=5)
        rep = train(m, small_ds, epochs=2, lr=0.05, seed=5, out=tmp_path / "s.mmlc")
        runs.append((rep, registry_bytes(m)))
    (a, ba), (b, bb) = runs
    assert ba == bb and a.final_val_acc == b.final_val_acc
    assert [e.train_loss for e in a.epochs] == [e.train_loss for e in b.epochs]
    for e in a.epochs:
        assert 0 <= e.train_acc <= 1 and 0 <= e.val_acc <= 1 and math.isfinite(e.train_loss)
    assert [e.train_loss for e in parse_report_csv(a.to_csv())] == [e.train_loss for e in a.epochs]
    assert "optimizer" in a.to_text() and a.checkpoint.endswith("s.mmlc")


def test_distill_leaves_teacher_unchanged(small_ds):
    teacher = build_model(PRESETS["lite-tr-tiny"], seed=2)
    before = registry_bytes(teacher)
    rep, student = distill_run(teacher, "lite-st-tiny", small_ds, alpha=0.5, T=4, epochs=1, seed=0)
    assert registry_bytes(teacher) == before
    assert student.config.name == "lite-st-tiny" and rep.hyperparams["teacher"] == "lite-tr-tiny"


def test_distill_alpha_one_is_supervised(small_ds):
    teacher = build_model(PRESETS["lite-tr-tiny"], seed=2)
    _, s1 = distill_run(teacher, "lite-st-tiny", small_ds, alpha=1.0, epochs=1, seed=3)
    s2 = build_model(PRESETS["lite-st-tiny"], seed=3)
    train(s2, small_ds, epochs=1, seed=3)
    assert registry_bytes(s1) == registry_bytes(s2)


def test_distill_class_mismatch(small_ds):
    teacher = build_model(PRESETS["lite-tr-tiny"].replace(num_classes=5), seed=0)
    with pytest.raises(ConfigError):
        distill_run(teacher, "lite-st-tiny", small_ds, epochs=1)


def test_train_rejects_incompatible_dataset(small_ds):
    m = build_model(PRESETS["lite-st-tiny"].replace(num_classes=3))
    with pytest.raises(ConfigError):
        train(m, small_ds, epochs=1)
