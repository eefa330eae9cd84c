import math

import numpy as np
import pytest
from hypothesis import given, settings
from hypothesis import strategies as st

from mobilevit.model import build, count_params
from mobilevit.rng import Rng
from mobilevit.tensor import Tensor, grad_check
from mobilevit.train import (
    Schedule, TrainConfig, TrainState, _plans, adamw_step, augment, ema_update, label_smoothing_ce, lr_at,
    micro_config, random_resized_crop, synthetic_blobs, train_toy, write_metrics,
)


# -- schedule --------------------------------------------------------------------------


def test_schedule_endpoints():
    s = Schedule()
    assert abs(lr_at(s, 0) - 0.0002) <= 1e-9
    assert abs(lr_at(s, 3000) - 0.002) <= 1e-9
    assert abs(lr_at(s, s.total) - 0.0002) <= 1e-9


def test_schedule_continuous_at_warmup():
    s = Schedule()
    assert abs(lr_at(s, 3000 - 1e-7) - lr_at(s, 3000 + 1e-7)) <= 1e-9


def test_schedule_shape():
    s = Schedule(warmup=10, total=110)
    assert lr_at(s, 5) == pytest.approx(0.0002 + 0.0018 * 0.5)
    assert lr_at(s, 60) == pytest.approx(0.0002 + 0.0009)    # cosine midpoint
    lrs = [lr_at(s, t) for t in range(10, 111)]
    assert all(a >= b for a, b in zip(lrs, lrs[1:]))


def test_schedule_validation():
    with pytest.raises(ValueError):
        Schedule(warmup=10, total=5)


# -- label smoothing -------------------------------------------------------------------


@pytest.mark.parametrize("k,eps", [(2, 0.1), (5, 0.0), (10, 0.3)])
def test_uniform_logits_give_log_k(k, eps):
    loss = label_smoothing_ce(Tensor(np.zeros((3, k))), [0, 1, 1], eps).item()
    assert loss == pytest.approx(math.log(k), abs=1e-6)


@pytest.mark.parametrize("seed", range(5))
def test_zero_smoothing_is_cross_entropy(seed):
    r = np.random.default_rng(seed)
    logits = r.normal(size=(6, 7))
    y = r.integers(0, 7, 6)
    shifted = logits - logits.max(1, keepdims=True)
    ce = -np.mean(shifted[np.arange(6), y] - np.log(np.exp(shifted).sum(1)))
    assert label_smoothing_ce(Tensor(logits), y, 0.0).item() == pytest.approx(ce, abs=1e-5)


def test_two_class_closed_form():
    expect = -(0.95 * math.log(0.75) + 0.05 * math.log(0.25))
    got = label_smoothing_ce(Tensor([[math.log(3), 0.0]]), [0], 0.1).item()
    assert abs(got - expect) <= 1e-6


def test_label_smoothing_rejects_bad_targets():
    with pytest.raises(ValueError):
        label_smoothing_ce(Tensor(np.zeros((2, 3))), [0, 3])


def test_label_smoothing_gradcheck():
    x = Tensor(np.random.default_rng(0).normal(size=(4, 5)))
    assert grad_check(lambda t: label_smoothing_ce(t, [0, 4, 2, 2], 0.1), x, n_samples=None) < 1e-2


# -- AdamW -------------------------------------------------------------------------------


class One:
    """Minimal stand-in for a model exposing one named parameter."""

    def __init__(self, value, decay=True):
        self.w = Tensor(np.asarray(value, dtype=np.float32), requires_grad=True)
        self.decay = decay

    def named_parameters(self):
        return [("w", self.w)]

    def decay_mask(self):
        return {"w": self.decay}


def test_zero_grad_no_decay_unchanged():
    st_ = TrainState.from_model(One([1.0, -2.0]))
    adamw_step(st_, {"w": np.zeros(2, np.float32)}, lr=0.1, weight_decay=0.0)
    np.testing.assert_array_equal(st_.weights["w"].data, [1.0, -2.0])


def test_zero_grad_decay_scales():
    st_ = TrainState.from_model(One([1.0, -2.0]))
    adamw_step(st_, {"w": np.zeros(2, np.float32)}, lr=0.1, weight_decay=0.01)
    np.testing.assert_allclose(st_.weights["w"].data, [0.999, -1.998], rtol=1e-6)


def test_one_step_hand_iteration():
    st_ = TrainState.from_model(One([0.0]))
    adamw_step(st_, {"w": np.ones(1, np.float32)}, lr=0.001)
    # m_hat = v_hat = 1, so the step is lr / (1 + eps)
    assert st_.weights["w"].data[0] == pytest.approx(-0.001, abs=1e-9)


@given(st.integers(1, 30), st.floats(0.001, 0.1), st.floats(0.0, 0.1))
@settings(max_examples=25)
def test_decay_compounds(n, lr, wd):
    st_ = TrainState.from_model(One([1.5]))
    for _ in range(n):
        adamw_step(st_, {"w": np.zeros(1, np.float32)}, lr=lr, weight_decay=wd)
    assert st_.weights["w"].data[0] == pytest.approx(1.5 * (1 - lr * wd) ** n, rel=1e-4)


def test_decay_mask_respected():
    st_ = TrainState.from_model(One([1.0], decay=False))
    adamw_step(st_, {"w": np.zeros(1, np.float32)}, lr=0.1, weight_decay=0.5)
    assert st_.weights["w"].data[0] == 1.0


def test_moments_match_weight_shapes():
    model = build(micro_config(), 0)
    st_ = TrainState.from_model(model)
    for n, p in st_.weights.items():
        assert st_.m[n].shape == p.shape == st_.v[n].shape
    assert st_.step == 0


def test_non_finite_gradient_rejected():
    st_ = TrainState.from_model(One([1.0]))
    with pytest.raises(FloatingPointError):
        adamw_step(st_, {"w": np.array([np.nan], np.float32)}, lr=0.1)
    assert st_.step == 0 and st_.weights["w"].data[0] == 1.0


# -- EMA ---------------------------------------------------------------------------------


def test_ema_extremes():
    w = {"a": np.array([2.0], np.float32)}
    assert ema_update({"a": np.array([5.0], np.float32)}, w, 0.0)["a"][0] == 2.0
    assert ema_update({"a": np.array([5.0], np.float32)}, w, 1.0)["a"][0] == 5.0


def test_ema_two_steps():
    shadow = {"a": np.zeros(1, np.float32)}
    w = {"a": np.ones(1, np.float32)}
    ema_update(shadow, w, 0.9)
    ema_update(shadow, w, 0.9)
    assert abs(shadow["a"][0] - 0.19) <= 1e-6


# -- data ---------------------------------------------------------------------------------


def test_synthetic_is_linearly_separable():
    # least-squares one-vs-rest on per-image mean colour classifies every sample
    data = synthetic_blobs(256, 4, 64, seed=0)
    feats = np.c_[data.images.mean(axis=(2, 3)), np.ones(len(data))]
    targets = np.eye(4)[data.labels]
    coef, *_ = np.linalg.lstsq(feats, targets, rcond=None)
    assert np.mean((feats @ coef).argmax(1) == data.labels) == 1.0


def test_synthetic_deterministic_and_balanced():
    a, b = synthetic_blobs(40, 4, 16, seed=3), synthetic_blobs(40, 4, 16, seed=3)
    assert np.array_equal(a.images, b.images) and np.array_equal(a.labels, b.labels)
    assert np.bincount(a.labels).tolist() == [10] * 4
    assert a.images.min() >= 0 and a.images.max() <= 1


def test_random_resized_crop_shape_and_range():
    img = np.random.default_rng(0).uniform(size=(3, 40, 30)).astype(np.float32)
    for i in range(20):
        out = augment(img, 24, 24, Rng(i))
        assert out.shape == (3, 24, 24)
        assert out.min() >= -1e-6 and out.max() <= 1 + 1e-6


def test_crop_deterministic_given_rng():
    img = np.random.default_rng(0).uniform(size=(3, 32, 32)).astype(np.float32)
    assert np.array_equal(random_resized_crop(img, 16, 16, Rng(4)), random_resized_crop(img, 16, 16, Rng(4)))


# -- training loop ---------------------------------------------------------------------


def small_cfg(**kw):
    base = dict(epochs=2, resolutions=((24, 24), (32, 32)), batch_size=8, warmup=4, eval_resolution=32)
    base.update(kw)
    return TrainConfig(**base)


def test_micro_config_is_small():
    assert count_params(build(micro_config(), 0)) < 200_000


def test_ten_class_loss_decreases():
    data = synthetic_blobs(80, 10, 32, seed=1)
    cfg = small_cfg(epochs=20, warmup=10, sampler="standard", resolutions=((32, 32),))
    res = train_toy(micro_config(10), data, cfg)
    s = res["summary"]
    assert s["final_train_loss"] < s["initial_train_loss"]


def test_same_seed_same_metrics(tmp_path):
    data = synthetic_blobs(32, 4, 32, seed=0)
    a = train_toy(micro_config(), data, small_cfg())
    b = train_toy(micro_config(), data, small_cfg())
    write_metrics(tmp_path / "a", a)
    write_metrics(tmp_path / "b", b)
    assert (tmp_path / "a" / "metrics.csv").read_bytes() == (tmp_path / "b" / "metrics.csv").read_bytes()
    c = train_toy(micro_config(), data, small_cfg(seed=1))
    assert c["metrics"] != a["metrics"]


def test_multiscale_fewer_updates_than_standard():
    data = synthetic_blobs(64, 4, 32, seed=0)
    ms = train_toy(micro_config(), data, small_cfg(epochs=1, sampler="multiscale"))["summary"]
    std = train_toy(micro_config(), data, small_cfg(epochs=1, sampler="standard"))["summary"]
    assert ms["updates_per_epoch"][0] < std["updates_per_epoch"][0]


def test_every_resolution_executed():
    cfg = TrainConfig()
    rset_sum = sum(max(1, 64 * 64 * cfg.batch_size // (h * w)) for h, w in cfg.resolutions)
    for plan in _plans(cfg, 10 * rset_sum)[:3]:
        assert {b.resolution for b in plan} == set(cfg.resolutions)


def test_metrics_files(tmp_path):
    data = synthetic_blobs(16, 4, 32, seed=0)
    res = train_toy(micro_config(), data, small_cfg(epochs=1))
    write_metrics(tmp_path, res)
    header = (tmp_path / "metrics.csv").read_text().splitlines()[0]
    assert header == "epoch,split,loss,top1,lr,updates"
    assert {r["split"] for r in res["metrics"]} == {"train", "val", "val_ema"}
    assert (tmp_path / "report.json").exists()


def test_train_config_validation():
    with pytest.raises(ValueError):
        TrainConfig(sampler="bogus")
