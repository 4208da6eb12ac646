import csv
import json

import numpy as np
import pytest

import normkit.gradcheck
from normkit.cli import COMPARE_COLUMNS, main
from normkit.data import synthetic_means
from normkit.gmm import GmmParams

from conftest import CONFIGS


def rows(path):
    with open(path, newline="") as fh:
        return list(csv.DictReader(fh))


def tiny_config(tmp_path, name, norm="bn", extra=""):
    p = tmp_path / f"{name}.toml"
    p.write_text(
        "[dataset]\nn = 120\nn_val = 60\nd = 4\n"
        f"[norm]\nkind = '{norm}'\nk = 2\n"
        "[optimizer]\nepochs = 3\nbatch_size = 32\n" + extra
    )
    return p


class TestTrain:
    def test_synthetic_uan(self, tmp_path):
        out = tmp_path / "run"
        assert main(["train", str(CONFIGS / "synthetic_uan_k3.toml"), "--out", str(out)]) == 0
        lines = (out / "metrics.csv").read_text().splitlines()
        assert len(lines) == 51
        summary = json.loads((out / "summary.json").read_text())
        assert summary["epochs"] == 50 and summary["norm"]["kind"] == "uan"
        assert summary["final"]["val_acc"] >= 0.99
        assert json.loads((out / "config_resolved.json").read_text())["norm"]["k"] == 3
        assert (out / "checkpoint").is_dir()

    def test_rerun_identical(self, tmp_path):
        cfg = tiny_config(tmp_path, "t", "uan")
        for d in ("a", "b"):
            assert main(["train", str(cfg), "--out", str(tmp_path / d)]) == 0
        assert (tmp_path / "a/metrics.csv").read_bytes() == (tmp_path / "b/metrics.csv").read_bytes()

    def test_seed_override_changes_run(self, tmp_path):
        cfg = tiny_config(tmp_path, "t")
        main(["train", str(cfg), "--out", str(tmp_path / "a")])
        main(["train", str(cfg), "--out", str(tmp_path / "b"), "--seed", "7"])
        assert (tmp_path / "a/metrics.csv").read_bytes() != (tmp_path / "b/metrics.csv").read_bytes()
        assert json.loads((tmp_path / "b/config_resolved.json").read_text())["output"]["seed"] == 7

    def test_momentum_reaches_layer(self, tmp_path):
        cfg = tiny_config(tmp_path, "t", "uan", "")
        cfg.write_text(cfg.read_text().replace("k = 2\n", "k = 2\nmomentum = 0.99\n"))
        assert main(["train", str(cfg), "--out", str(tmp_path / "r")]) == 0
        layers = json.loads((tmp_path / "r/summary.json").read_text())["norm_layers"]
        assert [l["momentum"] for l in layers] == [0.99]
        assert layers[0]["mode"] == "moving_average"

    def test_bad_config_exits_2(self, tmp_path):
        cfg = tmp_path / "bad.toml"
        cfg.write_text("[norm]\nwhat = 1\n")
        assert main(["train", str(cfg), "--out", str(tmp_path / "r")]) == 2

    def test_missing_data_exits_3(self, tmp_path):
        cfg = tmp_path / "m.toml"
        cfg.write_text(f"[dataset]\nname = 'mnist'\nroot = '{tmp_path / 'none'}'\n")
        assert main(["train", str(cfg), "--out", str(tmp_path / "r")]) == 3

    def test_usage_error_exits_2(self):
        with pytest.raises(SystemExit) as exc:
            main(["train"])
        assert exc.value.code == 2

    def test_plot(self, tmp_path):
        assert main(["train", str(tiny_config(tmp_path, "t")), "--out", str(tmp_path / "r"), "--plot"]) == 0
        for name in ("curves.png", "gradvar.png"):
            assert (tmp_path / "r" / name).read_bytes()[:4] == b"\x89PNG"


class TestGmmFit:
    def test_k1_is_moments(self, tmp_path, rng):
        x = rng.normal(2.0, 3.0, size=(500, 3))
        np.save(tmp_path / "x.npy", x)
        assert main(["gmm-fit", "--data", str(tmp_path / "x.npy"), "--k", "1", "--out", str(tmp_path / "o")]) == 0
        g = GmmParams.load(tmp_path / "o/gmm.json")
        np.testing.assert_allclose(g.means[0], x.mean(axis=0), rtol=1e-12)
        np.testing.assert_allclose(g.variances[0], x.var(axis=0), rtol=1e-10)
        assert g.weights.tolist() == [1.0]

    def test_synthetic_recovery_and_trace(self, tmp_path):
        out = tmp_path / "o"
        assert main(["gmm-fit", "--synthetic", "n=900,d=2,k=3,separation=12,seed=1", "--k", "3",
                     "--out", str(out), "--plot"]) == 0
        g = GmmParams.load(out / "gmm.json")
        for m in synthetic_means(2, 3, 12.0):
            assert np.min(np.linalg.norm(g.means - m, axis=1)) < 0.3
        np.testing.assert_allclose(np.sort(g.weights), [1 / 3] * 3, atol=0.01)
        ll = [float(r["mean_loglik"]) for r in rows(out / "trace.csv")]
        assert all(b >= a - 1e-10 for a, b in zip(ll, ll[1:]))
        assert (out / "trace.png").exists()

    def test_csv_input(self, tmp_path):
        (tmp_path / "x.csv").write_text("0,0\n1,1\n10,10\n11,11\n")
        assert main(["gmm-fit", "--data", str(tmp_path / "x.csv"), "--k", "2", "--out", str(tmp_path / "o")]) == 0

    @pytest.mark.parametrize("argv,code", [
        (["--k", "2"], 2),
        (["--k", "2", "--synthetic", "n=10", "--data", "x.npy"], 2),
        (["--k", "2", "--synthetic", "bogus=1"], 2),
        (["--k", "0", "--synthetic", "n=10"], 2),
        (["--k", "5", "--synthetic", "n=3"], 3),
        (["--k", "2", "--data", "does-not-exist.npy"], 3),
    ])
    def test_errors(self, tmp_path, argv, code):
        assert main(["gmm-fit", *argv, "--out", str(tmp_path / "o")]) == code


class TestGradcheck:
    def test_passes(self, tmp_path, capsys):
        assert main(["gradcheck", "--cases", "3", "--out", str(tmp_path)]) == 0
        report = rows(tmp_path / "gradcheck.csv")
        assert {r["op"] for r in report} >= {"bn", "ln", "in", "gn", "mn", "uan", "uan_affine"}
        assert all(r["passed"] == "1" for r in report)

    def test_broken_backward_detected(self, tmp_path, monkeypatch, capsys):
        real = normkit.gradcheck.bn_backward

        def skewed(ctx, dy):
            dx, g = real(ctx, dy)
            return dx * 1.001, g

        monkeypatch.setattr(normkit.gradcheck, "bn_backward", skewed)
        assert main(["gradcheck", "--cases", "2", "--out", str(tmp_path)]) == 1
        assert "FAIL bn dx" in capsys.readouterr().err


class TestCompare:
    def test_synthetic_three_kinds(self, tmp_path):
        cfgs = [str(CONFIGS / f"synthetic_{k}_k3.toml") for k in ("bn", "mn", "uan")]
        assert main(["compare", *cfgs, "--seeds", "0", "1", "2", "--out", str(tmp_path), "--plot"]) == 0
        table = rows(tmp_path / "compare.csv")
        assert list(table[0]) == COMPARE_COLUMNS
        assert len(table) == 9 * 50
        by_kind = json.loads((tmp_path / "summary.json").read_text())["by_kind"]
        assert set(by_kind) == {"bn", "mn", "uan"}
        assert all(v["completed"] == 3 for v in by_kind.values())
        assert by_kind["uan"]["final_val_acc_mean"] >= by_kind["bn"]["final_val_acc_mean"]
        assert (tmp_path / "compare.png").exists()

    def test_failure_keeps_partial_results(self, tmp_path):
        good = tiny_config(tmp_path, "good")
        bad = tmp_path / "bad.toml"
        bad.write_text(f"[dataset]\nname = 'mnist'\nroot = '{tmp_path / 'none'}'\n")
        assert main(["compare", str(good), str(bad), "--seeds", "0", "--out", str(tmp_path / "o")]) == 1
        summary = json.loads((tmp_path / "o/summary.json").read_text())
        assert summary["failures"][0]["config"] == "bad"
        assert len(rows(tmp_path / "o/compare.csv")) == 3

    def test_workers_match_serial(self, tmp_path):
        cfgs = [str(tiny_config(tmp_path, n, n)) for n in ("bn", "uan")]
        main(["compare", *cfgs, "--seeds", "0", "1", "--out", str(tmp_path / "s")])
        main(["compare", *cfgs, "--seeds", "0", "1", "--out", str(tmp_path / "p"), "--workers", "2"])
        assert (tmp_path / "s/compare.csv").read_bytes() == (tmp_path / "p/compare.csv").read_bytes()

    def test_lr_sweep_labels(self, tmp_path):
        a = tiny_config(tmp_path, "slow")
        a.write_text(a.read_text().replace("epochs = 3", "epochs = 3\nlr = 0.001"))
        b = tiny_config(tmp_path, "fast")
        b.write_text(b.read_text().replace("epochs = 3", "epochs = 3\nlr = 0.01"))
        assert main(["compare", str(a), str(b), "--out", str(tmp_path / "o")]) == 0
        assert set(json.loads((tmp_path / "o/summary.json").read_text())["by_kind"]) == {"bn@lr=0.001", "bn@lr=0.01"}

    def test_duplicate_names(self, tmp_path):
        (tmp_path / "x").mkdir()
        a, b = tiny_config(tmp_path, "same"), tiny_config(tmp_path / "x", "same")
        assert main(["compare", str(a), str(b), "--out", str(tmp_path / "o")]) == 2
