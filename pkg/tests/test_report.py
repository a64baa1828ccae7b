from datetime import date, timedelta

import numpy as np
import pytest

from funcq.core import RunConfig
from funcq.fqi import fqi_run
from funcq.ingest import discretize, ingest_pipeline
from funcq.report import behavior_replay_provider, policy_provider, report_bundle

from .test_ingest import three_subject_fixture


@pytest.fixture(scope="module")
def ingested(tmp_path_factory):
    paths = three_subject_fixture(tmp_path_factory.mktemp("raw"))
    dataset, _ = ingest_pipeline(*paths, min_days=30)
    return dataset


def read_csv_rows(path):
    import csv

    with path.open(newline="") as fh:
        reader = csv.DictReader(fh)
        return list(reader)


class TestReplayReport:
    def test_behavior_replay_curves_coincide(self, ingested, tmp_path):
        files = report_bundle(ingested, behavior_replay_provider(ingested), tmp_path)
        rows = read_csv_rows(tmp_path / "global_mu_quantiles.csv")
        for row in rows:
            assert float(row["learned_mu_quantile"]) == pytest.approx(
                float(row["behavior_mu_quantile"])
            )
        sub = read_csv_rows(tmp_path / "subgroup_quantiles.csv")
        for row in sub:
            assert float(row["learned_mean"]) == pytest.approx(
                float(row["behavior_mean"])
            )
        names = {p.name for p in files}
        assert "subgroup_counts.csv" in names
        assert "global_mu_quantiles.svg" in names

    def test_subgroup_counts_match_direct_tally(self, ingested, tmp_path):
        report_bundle(ingested, behavior_replay_provider(ingested), tmp_path)
        rows = read_csv_rows(tmp_path / "subgroup_counts.csv")
        got = {
            (r["covariate"], r["level"]): int(r["n_transitions"]) for r in rows
        }
        oracle: dict[tuple[str, str], int] = {}
        for tr in ingested.transitions:
            for cov, level in discretize(tr.state):
                oracle[(cov, level)] = oracle.get((cov, level), 0) + 1
        assert got == oracle

    def test_markers_at_cut_points(self, ingested, tmp_path):
        report_bundle(ingested, behavior_replay_provider(ingested), tmp_path)
        rows = read_csv_rows(tmp_path / "subgroup_markers.csv")
        assert {float(r["p"]) for r in rows} == {0.33, 0.67}


def test_uniform_windows_mu_curve_at_8000(grid, tmp_path):
    # every action the LQD of uniform[6000, 10000]: the mean-steps quantile
    # curve is flat at 8000
    from funcq.core import Dataset
    from .conftest import make_dataset

    rng = np.random.default_rng(5)
    ds = make_dataset(
        rng, grid, n_subjects=4, n_steps=3, state_dim=6,
        action_fn=lambda s, r: np.full(len(grid), np.log(4000.0)),
    )
    ds = Dataset.from_transitions(
        ds.transitions, grid, action_anchors=np.full(len(ds), 6000.0)
    )
    report_bundle(ds, behavior_replay_provider(ds), tmp_path)
    rows = read_csv_rows(tmp_path / "global_mu_quantiles.csv")
    for row in rows:
        assert float(row["behavior_mu_quantile"]) == pytest.approx(8000.0, abs=1e-6)


class TestPolicyReport:
    def test_learned_policy_bundle(self, ingested, tmp_path):
        cfg = RunConfig(
            gamma=0.8, iterations=3, mc_samples=4, seed=0,
            ridge=1e-3, roughness_weight=1e-3, reward_max=2.0,
        )
        fit = fqi_run(ingested, cfg)
        provider = policy_provider(fit.policy, ingested, neighbors=3)
        files = report_bundle(ingested, provider, tmp_path)
        assert (tmp_path / "global_mu_quantiles.csv").exists()
        rows = read_csv_rows(tmp_path / "global_mu_quantiles.csv")
        learned = np.array([float(r["learned_mu_quantile"]) for r in rows])
        # recommended mean steps stay positive and ordered (quantile curve)
        assert np.all(np.diff(learned) >= -1e-9)
        assert learned.min() > 0
        # the learned policy's actions must sit inside the behavior LQD
        # envelope, not collapse to the flat zero curve far from the data
        behavior = ingested.actions
        actions = np.array(
            [fit.policy.action_for_raw(tr.state).values for tr in ingested.transitions]
        )
        margin = 2 * behavior.std()
        assert actions.min() >= behavior.min() - margin
        assert actions.max() <= behavior.max() + margin
        assert np.abs(actions - behavior.mean()).min() < margin

    def test_missing_anchors_rejected(self, grid, rng, tmp_path):
        from .conftest import make_dataset

        ds = make_dataset(rng, grid, n_subjects=3, n_steps=3)
        with pytest.raises(ValueError, match="anchors"):
            report_bundle(ds, lambda d, i: (d.transitions[i].action.values, 0.0), tmp_path)


def test_svg_deterministic(tmp_path):
    from funcq.svgplot import Series, line_plot

    x = np.linspace(0, 1, 20)
    series = [Series(x, np.sin(x), "#cc2222", "sin")]
    p1 = line_plot(tmp_path / "a.svg", series, title="t", vlines=(0.33,))
    p2 = line_plot(tmp_path / "b.svg", series, title="t", vlines=(0.33,))
    assert p1.read_bytes() == p2.read_bytes()
    text = p1.read_text()
    assert text.startswith("<svg")
    assert "polyline" in text
