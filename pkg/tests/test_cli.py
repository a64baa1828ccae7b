import json
from pathlib import Path

import numpy as np
import pytest

from funcq.cli import main

from .test_ingest import three_subject_fixture


def run_cli(*args):
    return main([str(a) for a in args])


@pytest.fixture()
def sim_dir(tmp_path):
    out = tmp_path / "sim"
    code = run_cli(
        "simulate", "--output-dir", out, "--subjects", 8, "--steps", 3,
        "--seed", 4, "--grid-points", 31,
    )
    assert code == 0
    return out


class TestExitCodes:
    def test_help_exits_zero(self, capsys):
        with pytest.raises(SystemExit) as exc:
            run_cli("fqi", "--help")
        assert exc.value.code == 0
        assert "usage" in capsys.readouterr().out

    def test_missing_dataset_exit_one(self, tmp_path, capsys):
        code = run_cli(
            "fqi", "--dataset-dir", tmp_path / "nope", "--output-dir", tmp_path / "o",
        )
        assert code == 1
        assert "nope" in capsys.readouterr().err

    def test_unknown_flag_exit_one(self, tmp_path):
        with pytest.raises(SystemExit) as exc:
            run_cli("simulate", "--output-dir", tmp_path, "--bogus", 1)
        assert exc.value.code == 1

    def test_bad_config_exit_one(self, sim_dir, tmp_path, capsys):
        cfg = tmp_path / "cfg.json"
        cfg.write_text(json.dumps({"gamma": 2.0}))
        code = run_cli(
            "fqi", "--dataset-dir", sim_dir, "--output-dir", tmp_path / "o",
            "--config", cfg,
        )
        assert code == 1

    def test_numerical_error_exit_two(self, tmp_path, capsys):
        # identical actions everywhere make the bandwidth heuristic degenerate
        from funcq.core import Grid, save_dataset
        from .conftest import make_dataset

        grid = Grid.uniform(21)
        rng = np.random.default_rng(0)
        ds = make_dataset(
            rng, grid, n_subjects=4, n_steps=2,
            action_fn=lambda s, r: np.ones(len(grid)),
        )
        ds_dir = tmp_path / "degenerate"
        save_dataset(ds, ds_dir)
        code = run_cli(
            "fqi", "--dataset-dir", ds_dir, "--output-dir", tmp_path / "o",
        )
        assert code == 2
        assert "degenerate" in capsys.readouterr().err


class TestSimulate:
    def test_outputs_and_manifest(self, sim_dir):
        manifest = json.loads((sim_dir / "manifest.json").read_text())
        assert manifest["command"] == "simulate"
        names = set(manifest["outputs"])
        assert "dataset_transitions.csv" in names
        assert "env_spec.json" in names
        for out in names:
            assert (sim_dir / out).exists()

    def test_tabular_env(self, tmp_path):
        out = tmp_path / "tab"
        code = run_cli(
            "simulate", "--env", "tabular", "--output-dir", out,
            "--subjects", 5, "--steps", 4, "--seed", 1, "--grid-points", 21,
        )
        assert code == 0
        assert (out / "dataset_transitions.csv").exists()


class TestFqiFqeReport:
    def test_full_chain(self, sim_dir, tmp_path, capsys):
        cfg = tmp_path / "cfg.json"
        cfg.write_text(
            json.dumps(
                {"gamma": 0.8, "iterations": 3, "mc_samples": 4,
                 "ridge": 1e-3, "roughness_weight": 1e-3}
            )
        )
        fqi_out = tmp_path / "fqi"
        assert run_cli(
            "fqi", "--dataset-dir", sim_dir, "--output-dir", fqi_out,
            "--config", cfg, "--seed", 0,
        ) == 0
        assert (fqi_out / "policy.json").exists()
        assert (fqi_out / "fqi_diagnostics.csv").exists()

        fqe_out = tmp_path / "fqe"
        assert run_cli(
            "fqe", "--dataset-dir", sim_dir, "--policy", fqi_out / "policy.json",
            "--output-dir", fqe_out, "--config", cfg, "--seed", 0,
        ) == 0
        result = json.loads((fqe_out / "fqe_result.json").read_text())
        assert np.isfinite(result["value_estimate"])
        assert len(result["residuals"]) == 3

    def test_tune(self, sim_dir, tmp_path):
        out = tmp_path / "tune"
        code = run_cli(
            "tune", "--dataset-dir", sim_dir, "--output-dir", out,
            "--ridge-grid", "1e-3", "--roughness-grid", "1e-4,1e-3",
            "--bandwidth-grid", "1.0", "--seed", 0, "--iterations", 2,
        )
        assert code == 0
        result = json.loads((out / "tune_result.json").read_text())
        assert result["ridge"] == 1e-3
        assert len(result["table"]) == 2


class TestIngestAndReport:
    def test_ingest_then_report(self, tmp_path, capsys):
        raw_dir = tmp_path / "raw"
        raw_dir.mkdir()
        raw = three_subject_fixture(raw_dir)
        ing = tmp_path / "ingested"
        assert run_cli(
            "ingest", "--steps", raw[0], "--biomarkers", raw[1],
            "--demographics", raw[2], "--output-dir", ing, "--grid-points", 51,
        ) == 0
        report = json.loads((ing / "ingest_report.json").read_text())
        assert report["subjects_retained"] == ["A", "B"]

        cfg = tmp_path / "cfg.json"
        cfg.write_text(
            json.dumps(
                {"gamma": 0.8, "iterations": 2, "mc_samples": 4,
                 "ridge": 1e-3, "roughness_weight": 1e-3, "reward_max": 2.0}
            )
        )
        fqi_out = tmp_path / "fqi"
        assert run_cli(
            "fqi", "--dataset-dir", ing, "--output-dir", fqi_out,
            "--config", cfg, "--seed", 0,
        ) == 0
        rep_out = tmp_path / "report"
        assert run_cli(
            "report", "--dataset-dir", ing, "--policy", fqi_out / "policy.json",
            "--output-dir", rep_out, "--neighbors", 3,
        ) == 0
        assert (rep_out / "global_mu_quantiles.svg").exists()
        manifest = json.loads((rep_out / "manifest.json").read_text())
        listed = set(manifest["outputs"])
        on_disk = {
            p.name for p in rep_out.iterdir() if p.name != "manifest.json"
        }
        assert listed == on_disk


class TestTransform:
    def test_steps_to_lqd_and_back(self, tmp_path):
        rng = np.random.default_rng(3)
        steps = np.clip(rng.normal(8000, 1200, size=60), 200, 22000)
        src = tmp_path / "steps.csv"
        src.write_text("steps\n" + "\n".join(f"{s:.1f}" for s in steps) + "\n")
        out = tmp_path / "lqd"
        assert run_cli(
            "transform", "--mode", "steps-to-lqd", "--input", src,
            "--output-dir", out, "--grid-points", 51,
        ) == 0
        meta = json.loads((out / "meta.json").read_text())
        out2 = tmp_path / "q"
        assert run_cli(
            "transform", "--mode", "lqd-to-quantile", "--input", out / "lqd.csv",
            "--q0", meta["q0"], "--output-dir", out2,
        ) == 0
        import csv

        with (out2 / "quantile.csv").open(newline="") as fh:
            rows = list(csv.DictReader(fh))
        values = np.array([float(r["value"]) for r in rows])
        assert np.all(np.diff(values) >= -1e-9)
        mid = values[len(values) // 2]
        assert abs(mid - np.median(steps)) / np.median(steps) < 0.1

    def test_missing_column_exit_one(self, tmp_path, capsys):
        src = tmp_path / "bad.csv"
        src.write_text("not_steps\n1\n")
        code = run_cli(
            "transform", "--mode", "steps-to-lqd", "--input", src,
            "--output-dir", tmp_path / "o",
        )
        assert code == 1


class TestThreadCap:
    def test_explicit_flag_overrides_blas_vars(self, monkeypatch):
        from funcq.cli import _apply_thread_cap

        monkeypatch.setenv("OMP_NUM_THREADS", "16")
        monkeypatch.delenv("FUNCQ_THREADS", raising=False)
        assert _apply_thread_cap(["fqi", "--threads", "3"]) == 3
        import os

        assert os.environ["OMP_NUM_THREADS"] == "3"

    def test_env_var_mirrors_flag(self, monkeypatch):
        from funcq.cli import _apply_thread_cap

        monkeypatch.setenv("FUNCQ_THREADS", "5")
        monkeypatch.delenv("OPENBLAS_NUM_THREADS", raising=False)
        assert _apply_thread_cap(["simulate"]) == 5
        import os

        assert os.environ["OPENBLAS_NUM_THREADS"] == "5"

    def test_default_fills_unset_only(self, monkeypatch):
        from funcq.cli import _apply_thread_cap

        monkeypatch.delenv("FUNCQ_THREADS", raising=False)
        monkeypatch.setenv("MKL_NUM_THREADS", "8")
        monkeypatch.delenv("NUMEXPR_NUM_THREADS", raising=False)
        assert _apply_thread_cap(["simulate"]) == 1
        import os

        assert os.environ["MKL_NUM_THREADS"] == "8"
        assert os.environ["NUMEXPR_NUM_THREADS"] == "1"


class TestDeterminism:
    def test_repeated_runs_byte_identical(self, tmp_path):
        args_for = lambda base: [
            ("simulate", "--output-dir", base / "sim", "--subjects", 6,
             "--steps", 3, "--seed", 9, "--grid-points", 31),
            ("fqi", "--dataset-dir", base / "sim", "--output-dir", base / "fqi",
             "--seed", 9, "--iterations", 2),
        ]
        for base in (tmp_path / "run1", tmp_path / "run2"):
            for args in args_for(base):
                assert run_cli(*args) == 0
        for rel in ("sim", "fqi"):
            d1 = tmp_path / "run1" / rel
            d2 = tmp_path / "run2" / rel
            files1 = sorted(p.name for p in d1.iterdir())
            assert files1 == sorted(p.name for p in d2.iterdir())
            for name in files1:
                if name == "manifest.json":
                    m1 = json.loads((d1 / name).read_text())
                    m2 = json.loads((d2 / name).read_text())
                    # paths under run1/run2 differ; content hashes must not
                    assert [i["sha256"] for i in m1["inputs"]] == [
                        i["sha256"] for i in m2["inputs"]
                    ]
                    assert m1["outputs"] == m2["outputs"]
                else:
                    assert (d1 / name).read_bytes() == (d2 / name).read_bytes()
