import csv
import os

import numpy as np
import pytest

from tempex import cli, data, experiment as xp


def run_cli(*argv):
    return cli.main(list(argv))


@pytest.fixture()
def tiny_dataset(tmp_path):
    path = tmp_path / "ds.zip"
    ds = data.generate_hmm(data.HmmConfig(n_series=12, n_steps=16, seed=0))
    data.save_dataset(ds, path)
    return path


class TestGenerateTrainExplain:
    def test_generate_writes_archive(self, tmp_path):
        out = tmp_path / "hmm.zip"
        run_cli("generate", "--experiment", "hmm", "--out", str(out),
                "--n-series", "8", "--n-steps", "12", "--seed", "3")
        ds = data.load_dataset(out)
        assert ds.X.shape == (8, 12, 3)
        assert ds.true_saliency is not None

    def test_generate_icu(self, tmp_path):
        out = tmp_path / "icu.zip"
        run_cli("generate", "--experiment", "icu_like", "--out", str(out),
                "--n-series", "8", "--n-steps", "12")
        ds = data.load_dataset(out)
        assert ds.X.shape == (8, 12, 8)
        assert ds.y.shape == (8,)

    def test_train_then_explain_then_evaluate(self, tiny_dataset, tmp_path,
                                              capsys):
        model = tmp_path / "m.json"
        run_cli("train", "--data", str(tiny_dataset), "--out", str(model),
                "--hidden", "8", "--epochs", "2", "--seed", "0")
        sal = tmp_path / "sal.csv"
        run_cli("explain", "--data", str(tiny_dataset), "--model",
                str(model), "--method", "learned", "--samples", "2",
                "--iterations", "3", "--out", str(sal))
        run_cli("evaluate", "--data", str(tiny_dataset), "--saliency",
                str(sal))
        out = capsys.readouterr().out
        assert "aup" in out and "aur" in out


class TestRun:
    def _tiny_run(self, tmp_path, *extra):
        out = tmp_path / "run"
        code = run_cli(
            "run", "--experiment", "hmm", "--profile", "fast",
            "--out", str(out), "--folds", "1", "--seed", "0", *extra)
        return code, out

    @pytest.fixture()
    def small_profile(self, monkeypatch):
        monkeypatch.setitem(
            xp.PROFILES, (xp.HMM, xp.FAST),
            dict(n_series=16, n_steps=12, eval_samples=8, iterations=3,
                 epochs=1, hidden=8))
        monkeypatch.setitem(
            xp.PROFILES, (xp.ICU, xp.FAST),
            dict(n_series=16, n_steps=12, eval_samples=8, iterations=3,
                 epochs=1, hidden=8, fractions=(0.2, 0.4)))

    def test_smoke_emits_results_csv(self, tmp_path, small_profile):
        code, out = self._tiny_run(tmp_path)
        assert code == 0
        rows = xp.load_results(out / "hmm_results.csv")
        methods = {r["method"] for r in rows}
        assert "learned_preservation" in methods
        assert "dynamask" in methods
        assert (out / "hmm_aggregated.csv").exists()
        assert (out / "config.ini").exists()
        assert (out / "models" / "fold0.json").exists()

    def test_refuses_existing_dir_without_force(self, tmp_path,
                                                small_profile):
        code, out = self._tiny_run(tmp_path)
        assert code == 0
        with pytest.raises(SystemExit):
            self._tiny_run(tmp_path)
        code, _ = self._tiny_run(tmp_path, "--force")
        assert code == 0

    def test_determinism_identical_csv_bytes(self, tmp_path, small_profile):
        _, out1 = self._tiny_run(tmp_path / "a")
        _, out2 = self._tiny_run(tmp_path / "b")
        b1 = (out1 / "hmm_results.csv").read_bytes()
        b2 = (out2 / "hmm_results.csv").read_bytes()
        assert b1 == b2

    def test_seed_env_override(self, tmp_path, small_profile, monkeypatch):
        _, out1 = self._tiny_run(tmp_path / "a")
        monkeypatch.setenv(cli.SEED_ENV, "7")
        out2 = tmp_path / "b"
        code = run_cli("run", "--experiment", "hmm", "--profile", "fast",
                       "--out", str(out2), "--folds", "1")
        assert code == 0
        assert (out1 / "hmm_results.csv").read_bytes() != \
            (out2 / "hmm_results.csv").read_bytes()

    def test_lambda_ablation_grid(self, tmp_path, small_profile,
                                  monkeypatch):
        monkeypatch.setattr(xp, "LAMBDAS", (0.1, 1.0))
        out = tmp_path / "grid"
        code = run_cli("run", "--experiment", "hmm", "--profile", "fast",
                       "--out", str(out), "--folds", "1", "--ablation",
                       "lambda")
        assert code == 0
        rows = xp.load_results(out / "hmm_results.csv")
        methods = {r["method"] for r in rows}
        assert methods == {f"learned_l1={a:g}_l2={b:g}"
                           for a in (0.1, 1.0) for b in (0.1, 1.0)}

    def test_icu_compare_generators(self, tmp_path, small_profile):
        out = tmp_path / "icu"
        code = run_cli("run", "--experiment", "icu_like", "--profile",
                       "fast", "--out", str(out), "--folds", "1",
                       "--compare-generators")
        assert code == 0
        rows = xp.load_results(out / "icu_like_results.csv")
        methods = {r["method"] for r in rows}
        assert {"learned_preservation", "learned_gru",
                "learned_zeros"} <= methods
        # charts exist for fraction-axis metrics
        svgs = [f for f in os.listdir(out) if f.endswith(".svg")]
        assert any("cross_entropy" in f for f in svgs)

    def test_config_file_keys_and_flag_override(self, tmp_path,
                                                small_profile):
        ini = tmp_path / "cfg.ini"
        ini.write_text("[run]\nexperiment = hmm\nprofile = fast\n"
                       "folds = 1\nseed = 5\n"
                       "[dataset]\nn_series = 10\n")
        out = tmp_path / "run"
        code = run_cli("run", "--config", str(ini), "--out", str(out))
        assert code == 0
        text = (out / "config.ini").read_text()
        assert "n_series = 10" in text
        assert "seed = 5" in text

    def test_failure_names_stage_and_keeps_partials(self, tmp_path,
                                                    small_profile,
                                                    monkeypatch, capsys):
        calls = {"n": 0}
        orig = xp.hmm_fold

        def boom(cfg, fold):
            calls["n"] += 1
            if fold == 1:
                with xp._stage("explain:learned_preservation"):
                    raise RuntimeError("synthetic failure")
            return orig(cfg, fold)

        monkeypatch.setattr(xp, "hmm_fold", boom)
        out = tmp_path / "run"
        code = run_cli("run", "--experiment", "hmm", "--profile", "fast",
                       "--out", str(out), "--folds", "2")
        assert code == 1
        err = capsys.readouterr().err
        assert "explain:learned_preservation" in err
        # fold 0 results were flushed before the failure
        rows = xp.load_results(out / "hmm_results.csv")
        assert {r["fold"] for r in rows} == {"0"}


class TestReport:
    def test_empty_dir_errors_with_expected_files(self, tmp_path, capsys):
        with pytest.raises(SystemExit) as exc:
            run_cli("report", "--dir", str(tmp_path))
        assert "aggregated" in str(exc.value)

    def test_report_prints_tables(self, tmp_path, capsys):
        path = tmp_path / "hmm_aggregated.csv"
        with open(path, "w", newline="") as fh:
            w = csv.writer(fh)
            w.writerow(xp.CSV_HEADER)
            for method in ("learned_preservation", "learned_deletion"):
                for metric, val in (("aup", 0.8), ("aur", 0.7),
                                    ("information", 100.0),
                                    ("entropy", 40.0)):
                    w.writerow([method, metric, "", "", repr(val),
                                repr(0.01), "all"])
        code = run_cli("report", "--dir", str(tmp_path))
        assert code == 0
        out = capsys.readouterr().out
        assert "learned_preservation" in out
        assert "deletion vs preservation" in out
        assert "0.800 (0.010)" in out
