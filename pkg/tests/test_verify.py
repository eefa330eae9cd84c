import json

import numpy as np
import pytest

from mobilevit.model import ModelConfig, build, count_params
from mobilevit.train import micro_config
from mobilevit.verify import (
    SUITES, SuiteReport, conv_probe, format_study, gradcheck_cases, mobilevit_probe, patch_size_study, reports_json, run_suite,
)


# -- receptive-field probe -------------------------------------------------------------


@pytest.mark.parametrize("size", [8, 16])
@pytest.mark.parametrize("tap", ["output", "global"])
def test_patch2_full_coverage(size, tap):
    assert mobilevit_probe(size, 2, tap=tap).coverage == 1.0


def test_patch4_incomplete_global():
    rep = mobilevit_probe(8, 4, tap="global")
    assert 0 < rep.coverage < 1.0


def test_patch4_incomplete_at_corner():
    assert mobilevit_probe(8, 4, coordinate=(0, 0)).coverage < 1.0


def test_conv_control():
    rep = conv_probe(8)
    assert rep.coverage == 9 / 64
    ys, xs = np.nonzero(rep.mask)
    assert (ys.min(), ys.max(), xs.min(), xs.max()) == (3, 5, 3, 5)


def test_coverage_monotone_in_patch():
    assert mobilevit_probe(8, 2, tap="global").coverage > mobilevit_probe(8, 4, tap="global").coverage


def test_probe_deterministic():
    a, b = mobilevit_probe(8, 4, tap="global", seed=3), mobilevit_probe(8, 4, tap="global", seed=3)
    assert np.array_equal(a.mask, b.mask)


def test_probe_report_fields():
    d = mobilevit_probe(8, 2).to_dict()
    assert d["cells"] == 64 and d["support"] == 64 and 0 <= d["coverage"] <= 1
    assert d["config"]["patch"] == 2


def test_probe_rejects_outside_coordinate():
    with pytest.raises(IndexError):
        mobilevit_probe(8, 2, coordinate=(8, 0))


# -- suites ----------------------------------------------------------------------------


@pytest.mark.parametrize("name", ["roundtrip", "params", "sampler", "schedule", "field"])
def test_suite_passes(name):
    rep = run_suite(name)
    assert rep.passed, rep.to_text()


def test_roundtrip_suite_runs_fifty_cases():
    rep = run_suite("roundtrip")
    assert any("50/50" in c["detail"] for c in rep.cases)


def test_gradcheck_suite_cases_cover_layers_and_blocks():
    names = set(gradcheck_cases())
    for needed in ("conv2d", "conv2d_depthwise", "batchnorm_train", "layernorm", "attention", "transformer_layer",
                   "mv2_block", "mobilevit_block"):
        assert needed in names


@pytest.mark.parametrize("name", sorted(gradcheck_cases()))
def test_gradcheck_case_three_seeds(name):
    run = gradcheck_cases(seed=11)[name]
    assert max(run(i) for i in range(3)) < 1e-2


def test_unknown_suite():
    with pytest.raises(KeyError):
        run_suite("nosuch")


def test_reports_json():
    rep = run_suite("schedule")
    data = json.loads(reports_json([rep]))
    assert data["passed"] and data["suites"][0]["suite"] == "schedule"
    assert set(SUITES) >= {"roundtrip", "gradcheck", "params", "sampler", "schedule"}


def test_failed_case_is_reported():
    rep = SuiteReport("x")
    rep.check("good", True)
    rep.check("bad", False, "detail here")
    assert not rep.passed
    assert "FAIL bad: detail here" in rep.to_text()


# -- patch-size study ------------------------------------------------------------------


@pytest.fixture(scope="module")
def study():
    return patch_size_study(micro_config(), input_size=256)


def test_study_params_equal(study):
    assert len({r["params"] for r in study}) == 1
    assert study[0]["params"] == count_params(build(micro_config()))


def test_study_config_b_cheaper(study):
    by = {tuple(r["patch"]): r for r in study}
    assert by[(8, 4, 2)]["attention_macs"] < by[(2, 2, 2)]["attention_macs"]


def test_study_patch3_resizes_and_covers(study):
    row = next(r for r in study if r["patch"] == [3, 3, 3])
    assert row["resized"][0]           # 32 is not a multiple of 3
    assert row["coverage"] == [1.0, 1.0, 1.0]


def test_study_patch2_full_and_patch4_reduced(study):
    by = {tuple(r["patch"]): r for r in study}
    assert by[(2, 2, 2)]["coverage"] == [1.0, 1.0, 1.0]
    assert min(by[(4, 4, 4)]["coverage"]) < 1.0


def test_format_study(study):
    text = format_study(study)
    assert "8,4,2" in text and len(text.splitlines()) == 5


def test_full_variant_study_params_equal():
    rows = patch_size_study(ModelConfig("XXS"), input_size=64, settings=((2, 2, 2), (8, 4, 2)))
    assert rows[0]["params"] == rows[1]["params"]
