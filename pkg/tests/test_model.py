import numpy as np
import pytest

from mobilevit.blocks import MobileViTBlock, MV2Block
from mobilevit.model import (
    ARCHS, REPORTED_PARAMS, ModelConfig, attention_cost, build, count_params, forward, load_weights,
    param_breakdown, parse_patch_config, save_weights,
)
from mobilevit.tensor import ShapeError, Tensor


@pytest.fixture(scope="module")
def models():
    return {v: build(v, 0) for v in ARCHS}


def batch(b, size, seed=0):
    return Tensor(np.random.default_rng(seed).normal(size=(b, 3, size, size)))


# -- construction ----------------------------------------------------------------------


def test_s_stride8_stage_dims(models):
    blk = models["S"].layer3.mvit
    assert (blk.spec.channels, blk.spec.dim, blk.spec.depth) == (96, 144, 2)


@pytest.mark.parametrize("variant,t", [("XXS", 2), ("XS", 4), ("S", 4)])
def test_expansion_factor(models, variant, t):
    mv2 = [b for _, b in models[variant].blocks() if isinstance(b, MV2Block)]
    assert all(b.spec.expansion == t for b in mv2)
    assert models[variant].layer1.mv2_0.expand.conv.weight.shape[0] == 16 * t


@pytest.mark.parametrize("variant", list(ARCHS))
def test_block_layout(models, variant):
    a = ARCHS[variant]
    kinds = [(name, type(b).__name__) for name, b in models[variant].blocks()]
    # stride 2, stride 4 (x3), then MV2 down + MobileViT at strides 8/16/32
    assert [k for _, k in kinds] == ["MV2Block"] * 4 + ["MV2Block", "MobileViTBlock"] * 3
    vits = [b for _, b in models[variant].blocks() if isinstance(b, MobileViTBlock)]
    assert tuple(b.spec.dim for b in vits) == a.dims
    assert tuple(b.spec.depth for b in vits) == a.depths == (2, 4, 3)
    assert all(b.spec.heads == 4 for b in vits)
    assert all(d % 4 == 0 for d in a.dims)


def test_same_seed_bit_identical():
    a, b = build("XXS", 7), build("XXS", 7)
    for (ka, va), (kb, vb) in zip(a.state_dict().items(), b.state_dict().items()):
        assert ka == kb and np.array_equal(va, vb)
    c = build("XXS", 8)
    assert not np.array_equal(a.stem.conv.weight.data, c.stem.conv.weight.data)


def test_names_unique(models):
    names = [n for n, _ in models["S"].named_parameters()]
    assert len(names) == len(set(names))


def test_unknown_variant():
    with pytest.raises(ValueError):
        ModelConfig(variant="Q")


def test_parse_patch_config():
    assert parse_patch_config("A") == (2, 2, 2)
    assert parse_patch_config("b") == (8, 4, 2)
    assert parse_patch_config("3,3,3") == (3, 3, 3)
    for bad in ("1,2", "0,2,2", "C"):
        with pytest.raises(ValueError):
            parse_patch_config(bad)


# -- parameter counts ------------------------------------------------------------------


@pytest.mark.parametrize("variant", list(ARCHS))
def test_param_count_within_three_percent(models, variant):
    n = count_params(models[variant])
    assert abs(n - REPORTED_PARAMS[variant]) / REPORTED_PARAMS[variant] <= 0.03


def test_param_counts_monotone(models):
    c = [count_params(models[v]) for v in ("XXS", "XS", "S")]
    assert c[0] < c[1] < c[2]


def test_breakdown_sums_to_total(models):
    rows = param_breakdown(models["S"])
    assert sum(r["total"] for r in rows.values()) == count_params(models["S"])
    for r in rows.values():
        if r["mv2"] or r["mobilevit"]:
            assert r["mv2"] + r["mobilevit"] == r["total"]


def test_s_parameter_distribution(models):
    rows = param_breakdown(models["S"])
    total = count_params(models["S"])
    vit = sum(r["mobilevit"] for r in rows.values()) + rows["conv_exp"]["total"]
    mv2 = sum(r["mv2"] for r in rows.values())
    assert vit / total > 0.5
    assert mv2 < sum(r["mobilevit"] for r in rows.values())


def test_transformer_share_matches_layer_count(models):
    # every transformer layer in S has the enumerated 8d^2 + 11d parameters
    for _, blk in models["S"].blocks():
        if isinstance(blk, MobileViTBlock):
            d = blk.spec.dim
            assert all(layer.num_parameters() == 8 * d * d + 11 * d for layer in blk.layers)


# -- forward ---------------------------------------------------------------------------


def test_s_logits_shape(models):
    out = forward(models["S"], batch(2, 256))
    assert out.shape == (2, 1000) and np.all(np.isfinite(out.data))


@pytest.mark.parametrize("size", [160, 192, 256, 288, 320])
def test_any_sampler_resolution(models, size):
    out = forward(models["XXS"], batch(1, size, size))
    assert out.shape == (1, 1000) and np.all(np.isfinite(out.data))


@pytest.mark.parametrize("variant,width", [("XXS", 320), ("XS", 384), ("S", 640)])
def test_head_width_resolution_independent(models, variant, width):
    m = models[variant]
    assert m.classifier.weight.shape == (width, 1000)
    for size in (64, 96):
        assert m.eval().features(batch(1, size)).shape[1] == width


def test_eval_forward_deterministic(models):
    x = batch(1, 160)
    assert np.array_equal(forward(models["XS"], x).data, forward(models["XS"], x).data)


def test_forward_rejects_bad_input(models):
    with pytest.raises(ShapeError):
        forward(models["XXS"], Tensor(np.zeros((1, 4, 64, 64))))


# -- attention cost --------------------------------------------------------------------


def test_cost_stride16_level_of_s():
    blk = attention_cost("S", 256, 256)["blocks"][1]
    assert blk["feature"] == [16, 16]
    assert (blk["P"], blk["N"], blk["d"]) == (4, 64, 192)
    assert blk["attention_per_layer"] == 64 ** 2 * 4 * 192 == 3_145_728


def test_cost_ratio_is_patch_ratio():
    a = attention_cost(ModelConfig("S", patch=(2, 2, 2)), 256, 256)["blocks"]
    b = attention_cost(ModelConfig("S", patch=(8, 4, 2)), 256, 256)["blocks"]
    for ba, bb in zip(a, b):
        assert ba["d"] == bb["d"] and ba["feature"] == bb["feature"]
        assert ba["attention_per_layer"] * ba["P"] == bb["attention_per_layer"] * bb["P"]


@pytest.mark.parametrize("variant", list(ARCHS))
def test_config_b_cheaper(variant):
    a = attention_cost(ModelConfig(variant, patch=(2, 2, 2)), 256, 256)
    b = attention_cost(ModelConfig(variant, patch=(8, 4, 2)), 256, 256)
    assert b["attention_total"] < a["attention_total"]


def test_single_patch_is_minimum():
    # 8x8 features at stride 32: an 8x8 patch gives N = 1, cost P*d
    blk = attention_cost(ModelConfig("S", patch=(2, 2, 8)), 256, 256)["blocks"][2]
    assert blk["N"] == 1 and blk["attention_per_layer"] == 64 * 240
    for p in (1, 2, 4):
        other = attention_cost(ModelConfig("S", patch=(2, 2, p)), 256, 256)["blocks"][2]
        assert other["attention_per_layer"] > blk["attention_per_layer"]


def test_cost_uses_rounded_size():
    blk = attention_cost(ModelConfig("S", patch=(3, 3, 3)), 256, 256)["blocks"][0]
    assert blk["feature"] == [32, 32] and blk["resized"] == [33, 33]
    assert blk["N"] == 121 and blk["P"] == 9


# -- weights file ----------------------------------------------------------------------


def test_weights_round_trip_bit_exact(tmp_path, models):
    m = models["XXS"]
    path = tmp_path / "w.mvtw"
    save_weights(path, m)
    loaded = load_weights(path)
    state = m.state_dict()
    assert list(loaded) == list(state)
    for k in state:
        assert loaded[k].dtype == np.float32
        assert loaded[k].tobytes() == state[k].tobytes()
    other = build("XXS", 99)
    other.load_state_dict(loaded)
    x = batch(1, 64)
    assert np.array_equal(forward(other, x).data, forward(m, x).data)


def test_weights_header(tmp_path):
    path = tmp_path / "t.mvtw"
    save_weights(path, {"a": np.arange(6, dtype=np.float32).reshape(2, 3)})
    raw = path.read_bytes()
    assert raw[:4] == b"MVTW"
    assert int.from_bytes(raw[4:8], "little") == 1 and int.from_bytes(raw[8:12], "little") == 1
    assert len(raw) == 12 + 2 + 1 + 1 + 8 + 24


def test_weights_bad_magic(tmp_path):
    path = tmp_path / "bad.mvtw"
    path.write_bytes(b"NOPE" + bytes(8))
    with pytest.raises(ValueError, match="magic"):
        load_weights(path)
