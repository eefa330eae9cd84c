import csv
import json

import pytest

from mobilevit.cli import main, read_config_file
from mobilevit.model import load_weights


def run(capsys, *argv):
    code = main(list(argv))
    out = capsys.readouterr()
    return code, out.out, out.err


def run_exit(capsys, *argv):
    """argparse usage errors raise SystemExit; normalize to a code."""
    try:
        return run(capsys, *argv)
    except SystemExit as e:
        out = capsys.readouterr()
        return e.code, out.out, out.err


# -- params ----------------------------------------------------------------------------


def test_params_s(capsys):
    code, out, _ = run(capsys, "params", "--variant", "S")
    assert code == 0
    assert "(5.58 M)" in out and "layer3" in out and "classifier" in out


def test_params_xxs_json(capsys):
    code, out, _ = run(capsys, "params", "--variant", "XXS", "--json")
    data = json.loads(out)
    assert code == 0 and abs(data["total"] - 1.3e6) / 1.3e6 <= 0.03
    assert sum(s["total"] for s in data["stages"].values()) == data["total"]


def test_params_bad_variant(capsys):
    code, _, err = run_exit(capsys, "params", "--variant", "Q")
    assert code == 2 and "usage" in err


def test_params_patch_config_does_not_change_count(capsys):
    totals = [json.loads(run(capsys, "params", "--variant", "XS", "--patch-config", p, "--json")[1])["total"]
              for p in ("A", "B", "4,4,4")]
    assert len(set(totals)) == 1


# -- verify ----------------------------------------------------------------------------


def test_verify_roundtrip(capsys):
    code, out, _ = run(capsys, "verify", "--suite", "roundtrip")
    assert code == 0 and "[PASS] roundtrip" in out


def test_verify_all_consolidated(capsys, tmp_path):
    code, out, _ = run(capsys, "verify", "--out", str(tmp_path))
    assert code == 0 and "ALL PASSED" in out
    report = json.loads((tmp_path / "report.json").read_text())
    assert report["passed"] and {s["suite"] for s in report["suites"]} >= {
        "roundtrip", "gradcheck", "params", "sampler", "schedule"}


def test_verify_unknown_suite(capsys):
    code, _, err = run(capsys, "verify", "--suite", "nosuch")
    assert code == 2 and "unknown suite" in err


def test_verify_failure_exit_code(capsys, monkeypatch):
    from mobilevit import verify

    def failing(rep, cases, seed):
        rep.check("forced", False, "injected")
    monkeypatch.setitem(verify.SUITES, "schedule", (failing, 0))
    code, out, _ = run(capsys, "verify", "--suite", "schedule")
    assert code == 1 and "FAIL forced" in out


# -- bench ---------------------------------------------------------------------------


def test_bench_single_repeat_omits_stdev(capsys):
    code, out, _ = run(capsys, "bench", "--variant", "XXS", "--resolution", "64", "--repeats", "1", "--warmup", "0",
                       "--json")
    data = json.loads(out)
    assert code == 0 and "stdev_ms" not in data and data["mean_ms"] > 0


def test_bench_text_report(capsys):
    code, out, _ = run(capsys, "bench", "--variant", "XXS", "--resolution", "64", "--repeats", "3", "--warmup", "0")
    assert code == 0 and "+-" in out and "attention MACs" in out


def test_bench_config_b_attention_cheaper(capsys):
    res = {}
    for p in ("A", "B"):
        res[p] = json.loads(run(capsys, "bench", "--variant", "XS", "--resolution", "256", "--patch-config", p,
                                "--repeats", "1", "--warmup", "0", "--json")[1])
    assert res["B"]["attention_macs"] < res["A"]["attention_macs"]


def test_bench_backend_flag(capsys):
    from mobilevit import _kernels
    before = _kernels.active()
    try:
        data = json.loads(run(capsys, "bench", "--variant", "XXS", "--resolution", "32", "--repeats", "1",
                              "--backend", "python", "--json")[1])
    finally:
        _kernels.use(before)
    assert data["backend"] == "python"


# -- train ---------------------------------------------------------------------------


@pytest.fixture
def tiny_config(tmp_path):
    path = tmp_path / "cfg.txt"
    path.write_text("# tiny run\nepochs = 3\ndataset_size = 32\nval_size = 16\nimage_size = 32\n"
                    "resolutions = 24,32\nbatch_size = 8\nwarmup = 4\neval_resolution = 32\n")
    return path


def test_train_synthetic_outputs(capsys, tmp_path, tiny_config):
    out_dir = tmp_path / "run"
    code, out, _ = run(capsys, "train", "--config", str(tiny_config), "--epochs", "12", "--sampler", "standard",
                       "--out", str(out_dir))
    assert code == 0
    rows = list(csv.DictReader(open(out_dir / "metrics.csv")))
    train = [float(r["loss"]) for r in rows if r["split"] == "train"]
    # trend: the best loss of the second half beats the first half's
    assert len(train) == 12 and min(train[6:]) < min(train[:6])
    report = json.loads((out_dir / "report.json").read_text())
    assert report["epochs"] == 12
    assert load_weights(out_dir / "weights.mvtw")


def test_train_multiscale_fewer_updates(capsys, tmp_path, tiny_config):
    per_epoch = {}
    for sampler in ("standard", "multiscale"):
        d = tmp_path / sampler
        assert run(capsys, "train", "--config", str(tiny_config), "--sampler", sampler, "--epochs", "1",
                   "--out", str(d))[0] == 0
        per_epoch[sampler] = json.loads((d / "report.json").read_text())["updates_per_epoch"][0]
    assert per_epoch["multiscale"] < per_epoch["standard"]


def test_train_same_seed_identical_files(capsys, tmp_path, tiny_config):
    for name in ("a", "b"):
        run(capsys, "train", "--config", str(tiny_config), "--epochs", "1", "--seed", "4", "--out", str(tmp_path / name))
    for f in ("metrics.csv", "weights.mvtw"):
        assert (tmp_path / "a" / f).read_bytes() == (tmp_path / "b" / f).read_bytes()


def test_train_flag_overrides_file(capsys, tmp_path, tiny_config):
    run(capsys, "train", "--config", str(tiny_config), "--epochs", "1", "--out", str(tmp_path / "o"))
    assert json.loads((tmp_path / "o" / "report.json").read_text())["epochs"] == 1


def test_train_missing_data_dir(capsys, tmp_path):
    code, _, err = run(capsys, "train", "--data", str(tmp_path / "missing"))
    assert code == 2 and "does not exist" in err


def test_train_unknown_key(capsys, tmp_path):
    bad = tmp_path / "bad.txt"
    bad.write_text("learning_rate = 3\n")
    code, _, err = run(capsys, "train", "--config", str(bad))
    assert code == 2 and "unknown config key" in err


def test_train_image_folder(capsys, tmp_path):
    Image = pytest.importorskip("PIL.Image")
    import numpy as np
    root = tmp_path / "imgs"
    for k, colour in enumerate([(200, 30, 30), (30, 30, 200)]):
        (root / f"c{k}").mkdir(parents=True)
        for i in range(4):
            arr = np.full((20, 20, 3), colour, dtype=np.uint8)
            Image.fromarray(arr).save(root / f"c{k}" / f"{i}.png")
    cfg = tmp_path / "c.txt"
    cfg.write_text("epochs = 1\nimage_size = 32\nresolutions = 32\nbatch_size = 4\nwarmup = 1\neval_resolution = 32\n")
    code, out, _ = run(capsys, "train", "--config", str(cfg), "--data", str(root), "--out", str(tmp_path / "o"))
    assert code == 0 and (tmp_path / "o" / "weights.mvtw").exists()


def test_config_file_parsing(tmp_path):
    p = tmp_path / "c.txt"
    p.write_text("a = 1  # comment\n\n# whole line\nb=two\n")
    assert read_config_file(p) == {"a": "1", "b": "two"}


# -- sampler-sim -----------------------------------------------------------------------


def test_sampler_sim_default(capsys, tmp_path):
    code, out, _ = run(capsys, "sampler-sim", "--json", "--out", str(tmp_path))
    data = json.loads(out)
    assert code == 0
    assert data["standard_updates"] == 375_600
    assert data["multiscale_updates"] < 375_600
    assert data["batch_sizes"] == [4096, 2844, 1600, 1264, 1024]
    with open(tmp_path / "plan.csv") as f:
        n_rows = sum(1 for _ in f) - 1
    assert n_rows == data["multiscale_updates"]


def test_sampler_sim_singleton_equal(capsys):
    data = json.loads(run(capsys, "sampler-sim", "--resolutions", "256", "--epochs", "3", "--json")[1])
    assert data["standard_updates"] == data["multiscale_updates"]


def test_sampler_sim_seed_reproducible(capsys, tmp_path):
    for name in ("a", "b"):
        run(capsys, "sampler-sim", "--dataset-size", "50000", "--epochs", "4", "--seed", "9", "--out",
            str(tmp_path / name))
    assert (tmp_path / "a" / "plan.csv").read_bytes() == (tmp_path / "b" / "plan.csv").read_bytes()


def test_sampler_sim_bad_resolutions(capsys):
    code, _, _ = run_exit(capsys, "sampler-sim", "--resolutions", "big")
    assert code == 2
