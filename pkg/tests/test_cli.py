import json
import time

import numpy as np
import pytest

from sliceprof import cli, metrics
from sliceprof.gan import load_profile
from sliceprof.volume import load_volume


@pytest.fixture(scope="module")
def workdir(tmp_path_factory):
    d = tmp_path_factory.mktemp("cli")
    assert cli.main(["-q", "phantom", "--size", "64", "--seed", "1", "--out", str(d / "hr.raw")]) == 0
    assert cli.main(["-q", "simulate", "--in", str(d / "hr.raw"), "--kind", "gaussian", "--fwhm", "4",
                     "--scale", "2", "--out", str(d / "lr.nii"), "--truth", str(d / "truth.json")]) == 0
    return d


def run(*argv):
    return cli.main(["-q", *map(str, argv)])


def test_phantom_is_deterministic(tmp_path):
    assert run("phantom", "--size", 32, "--seed", 3, "--out", tmp_path / "a.raw") == 0
    assert run("phantom", "--size", 32, "--seed", 3, "--out", tmp_path / "b.raw") == 0
    assert (tmp_path / "a.raw").read_bytes() == (tmp_path / "b.raw").read_bytes()
    assert json.loads((tmp_path / "a.json").read_text())["spacing_mm"] == [1.0, 1.0, 1.0]


def test_phantom_96_is_fast(tmp_path):
    t0 = time.perf_counter()
    assert run("phantom", "--size", 96, "--seed", 0, "--out", tmp_path / "p.raw") == 0
    assert time.perf_counter() - t0 < 10


def test_phantom_seed_from_environment(tmp_path, monkeypatch):
    monkeypatch.setenv("RNG_SEED", "3")
    assert run("phantom", "--size", 32, "--out", tmp_path / "env.raw") == 0
    monkeypatch.delenv("RNG_SEED")
    assert run("phantom", "--size", 32, "--seed", 3, "--out", tmp_path / "flag.raw") == 0
    assert (tmp_path / "env.raw").read_bytes() == (tmp_path / "flag.raw").read_bytes()


def test_phantom_too_small(tmp_path):
    assert run("phantom", "--size", 16, "--out", tmp_path / "p.raw") == cli.EXIT_USAGE


def test_simulate_outputs(workdir):
    lr = load_volume(workdir / "lr.nii")
    assert lr.extents == (64, 64, (64 - 21) // 2 + 1)
    assert lr.spacing == (1.0, 1.0, 2.0)
    truth = load_profile(workdir / "truth.json")
    assert abs(metrics.fwhm(truth) - 4.0) <= 0.05
    meta = json.loads((workdir / "truth.json").read_text())
    assert (meta["kind"], meta["fwhm_mm"], meta["scale"]) == ("gaussian", 4.0, 2)


def test_simulate_scale_four_extents(workdir, tmp_path):
    assert run("simulate", "--in", workdir / "hr.raw", "--kind", "gaussian", "--fwhm", 4, "--scale", 4,
               "--out", tmp_path / "lr.raw", "--truth", tmp_path / "t.json") == 0
    lr = load_volume(tmp_path / "lr.raw")
    assert lr.extents == (64, 64, (64 - 21) // 4 + 1)
    assert lr.spacing == (1.0, 1.0, 4.0)


def test_simulate_rect(workdir, tmp_path):
    assert run("simulate", "--in", workdir / "hr.raw", "--kind", "rect", "--fwhm", 3, "--scale", 2,
               "--out", tmp_path / "lr.raw", "--truth", tmp_path / "t.json") == 0
    taps = load_profile(tmp_path / "t.json").taps
    np.testing.assert_allclose(taps[9:12], [1 / 3] * 3, atol=1e-15)
    assert taps.sum() == pytest.approx(1.0) and taps[:9].sum() == 0


def test_simulate_bad_kind(workdir, tmp_path):
    assert run("simulate", "--in", workdir / "hr.raw", "--kind", "sinc", "--fwhm", 3, "--scale", 2,
               "--out", tmp_path / "x.raw", "--truth", tmp_path / "t.json") == cli.EXIT_USAGE


def test_estimate_zero_iterations(workdir, tmp_path):
    out = tmp_path / "k.json"
    assert run("estimate", "--in", workdir / "lr.nii", "--out", out, "--iters", 0,
               "--svg", tmp_path / "k.svg") == 0
    k = load_profile(out)
    assert int(np.argmax(k.taps)) == 10 and k.taps[10] >= 0.5
    assert metrics.fwhm(k) == pytest.approx(1.5, abs=0.05)
    assert (tmp_path / "k.csv").exists()
    assert (tmp_path / "k.svg").read_text().startswith("<svg")


def test_estimate_is_deterministic(workdir, tmp_path):
    for name in ("a", "b"):
        assert run("estimate", "--in", workdir / "lr.nii", "--out", tmp_path / f"{name}.json",
                   "--iters", 2, "--batch", 2, "--seed", 7) == 0
    assert (tmp_path / "a.json").read_bytes() == (tmp_path / "b.json").read_bytes()


def test_estimate_resumes_from_checkpoint(workdir, tmp_path):
    common = ["--in", workdir / "lr.nii", "--batch", 2, "--seed", 7]
    assert run("estimate", *common, "--iters", 4, "--out", tmp_path / "straight.json") == 0
    ck = tmp_path / "ck.bin"
    assert run("estimate", *common, "--iters", 2, "--out", tmp_path / "half.json", "--checkpoint", ck) == 0
    assert run("estimate", *common, "--iters", 4, "--out", tmp_path / "resumed.json",
               "--checkpoint", ck, "--history", tmp_path / "h.csv") == 0
    assert (tmp_path / "straight.json").read_bytes() == (tmp_path / "resumed.json").read_bytes()
    assert len((tmp_path / "h.csv").read_text().strip().split("\n")) == 5


def test_estimate_usage_and_data_errors(tmp_path, capsys):
    assert run("estimate", "--out", tmp_path / "k.json") == cli.EXIT_USAGE
    assert "usage" in capsys.readouterr().err
    (tmp_path / "junk.bin").write_bytes(b"\x00" * 64)
    assert run("estimate", "--in", tmp_path / "junk.bin", "--out", tmp_path / "k.json") == cli.EXIT_DATA


def test_estimate_numerical_abort(workdir, tmp_path, monkeypatch):
    from sliceprof import trainer

    def boom(self):
        raise trainer.TrainingAborted(1, {"g_adv": float("nan")})

    monkeypatch.setattr(trainer.Trainer, "step", boom)
    assert run("estimate", "--in", workdir / "lr.nii", "--out", tmp_path / "k.json",
               "--iters", 1) == cli.EXIT_ABORT


def test_evaluate_identity(workdir, tmp_path):
    out = tmp_path / "r.json"
    assert run("evaluate", "--truth", workdir / "truth.json", "--est", workdir / "truth.json",
               "--hr", workdir / "hr.raw", "--out", out) == 0
    r = metrics.EvalReport.from_json(out.read_text())
    assert (r.fwhm_error_mm, r.profile_error, r.psnr_db) == (0.0, 0.0, 200.0)
    assert r.ssim == pytest.approx(1.0, abs=1e-12)
    assert r.config["scale"] == 2


def test_evaluate_report_fields_finite(workdir, tmp_path):
    assert run("estimate", "--in", workdir / "lr.nii", "--out", tmp_path / "k.json", "--iters", 0) == 0
    assert run("evaluate", "--truth", workdir / "truth.json", "--est", tmp_path / "k.json",
               "--hr", workdir / "hr.raw", "--out", tmp_path / "r.json") == 0
    doc = json.loads((tmp_path / "r.json").read_text())
    for key in ("fwhm_true_mm", "fwhm_est_mm", "fwhm_error_mm", "profile_error", "psnr_db", "ssim"):
        assert np.isfinite(doc[key]), key


def test_evaluate_grid_mismatch(workdir, tmp_path):
    (tmp_path / "k.json").write_text(json.dumps({"spacing_mm": 0.5, "taps": [0, 1, 0]}))
    assert run("evaluate", "--truth", workdir / "truth.json", "--est", tmp_path / "k.json",
               "--hr", workdir / "hr.raw", "--out", tmp_path / "r.json") == cli.EXIT_DATA


def test_evaluate_batch_table(workdir, tmp_path):
    for name in ("run1", "run2"):
        (tmp_path / name).mkdir()
        (tmp_path / name / "truth.json").write_text((workdir / "truth.json").read_text())
        (tmp_path / name / "k.json").write_text((workdir / "truth.json").read_text())
    assert run("evaluate", "--batch", tmp_path, "--hr", workdir / "hr.raw", "--out", tmp_path / "t.csv") == 0
    lines = (tmp_path / "t.csv").read_text().strip().split("\n")
    assert lines[0] == "metric,gaussian 4mm x2,gaussian 4mm x2"
    assert lines[3].startswith("PSNR,200.0000")
    assert (tmp_path / "run1" / "report.json").exists()


def test_measure_repeat_schema(workdir, tmp_path, capsys):
    out = tmp_path / "m.json"
    assert run("measure", "--in", workdir / "lr.nii", "--out", out, "--iters", 1, "--batch", 2,
               "--repeat", 3, "--seed", 2) == 0
    doc = json.loads(out.read_text())
    assert doc["seeds"] == [2, 3, 4]
    assert len(doc["fwhm_mm"]) == 3
    assert doc["sd"] == pytest.approx(np.std(doc["fwhm_mm"], ddof=1))
    assert "FWHM" in capsys.readouterr().out


def test_measure_isotropic_warns(tmp_path):
    assert run("phantom", "--size", 40, "--out", tmp_path / "iso.raw") == 0
    with pytest.warns(UserWarning, match="isotropic"):
        assert run("measure", "--in", tmp_path / "iso.raw", "--out", tmp_path / "m.json",
                   "--iters", 0) == 0
    doc = json.loads((tmp_path / "m.json").read_text())
    assert doc["mean"] == pytest.approx(metrics.fwhm(load_profile_init()), abs=1e-12)


def load_profile_init():
    from sliceprof import gan
    return gan.profile_of(gan.init_generator(np.random.default_rng(0)))
