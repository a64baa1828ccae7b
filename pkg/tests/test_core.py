import numpy as np
import pytest

from funcq.core import (
    Dataset,
    Grid,
    GridFunction,
    RunConfig,
    State,
    Transition,
    append_intercept,
    load_dataset,
    save_dataset,
    standardize_states,
    trapezoid_weights,
)

from .conftest import make_dataset


class TestTrapezoidWeights:
    def test_three_uniform_points(self):
        w = trapezoid_weights([0.0, 0.5, 1.0])
        assert np.allclose(w, [0.25, 0.5, 0.25], atol=0, rtol=0)

    def test_two_points(self):
        w = trapezoid_weights([0.0, 1.0])
        assert np.allclose(w, [0.5, 0.5], atol=0, rtol=0)

    def test_integrates_identity_exactly(self):
        pts = np.linspace(0.0, 1.0, 101)
        w = trapezoid_weights(pts)
        assert abs(w @ pts - 0.5) < 1e-12

    def test_integrates_affine_exactly(self, rng):
        # trapezoid is exact for affine functions on any grid
        for _ in range(10):
            interior = np.sort(rng.uniform(0.05, 0.95, size=17))
            pts = np.concatenate([[0.0], interior, [1.0]])
            w = trapezoid_weights(pts)
            a, b = rng.normal(size=2)
            assert abs(w @ (a * pts + b) - (a / 2 + b)) < 1e-12

    def test_rejects_short_and_nonmonotone(self):
        with pytest.raises(ValueError):
            trapezoid_weights([0.0])
        with pytest.raises(ValueError):
            trapezoid_weights([0.0, 0.7, 0.5, 1.0])

    def test_weights_sum_to_one(self):
        w = trapezoid_weights(np.linspace(0, 1, 37))
        assert abs(w.sum() - 1.0) < 1e-12


class TestGrid:
    def test_uniform_grid(self):
        g = Grid.uniform(11)
        assert len(g) == 11
        assert g.points[0] == 0.0 and g.points[-1] == 1.0
        assert abs(g.weights.sum() - 1.0) < 1e-12

    def test_rejects_bad_span(self):
        with pytest.raises(ValueError):
            Grid.from_points([0.1, 0.5, 1.0])

    def test_rejects_inconsistent_weights(self):
        with pytest.raises(ValueError, match="trapezoid"):
            Grid(points=np.array([0.0, 0.5, 1.0]), weights=np.array([0.4, 0.3, 0.3]))

    def test_grid_function_validation(self, grid):
        with pytest.raises(ValueError):
            GridFunction(grid, np.ones(7))
        with pytest.raises(ValueError):
            GridFunction(grid, np.full(len(grid), np.nan))

    def test_l2_distance(self, grid):
        a = GridFunction(grid, np.zeros(len(grid)))
        b = GridFunction(grid, np.full(len(grid), 2.0))
        assert abs(a.l2_distance(b) - 2.0) < 1e-12


class TestStandardize:
    def test_constant_component_flagged_untouched(self, rng, grid):
        ds = make_dataset(rng, grid, state_dim=3)
        transitions = [
            Transition(
                state=State(np.array([*tr.state.components[:2], 5.0])),
                action=tr.action,
                reward=tr.reward,
                next_state=State(np.array([*tr.next_state.components[:2], 5.0])),
                subject_id=tr.subject_id,
                time_index=tr.time_index,
            )
            for tr in ds.transitions
        ]
        ds2 = Dataset.from_transitions(transitions, grid)
        scaled, record = standardize_states(ds2)
        assert record.constant.tolist() == [False, False, True]
        assert np.all(scaled.states[:, 2] == 5.0)

    def test_two_point_symmetry(self, grid):
        values = np.zeros(len(grid))
        transitions = [
            Transition(
                state=State([x]),
                action=GridFunction(grid, values),
                reward=0.5,
                next_state=State([x]),
                subject_id=s,
                time_index=0,
            )
            for s, x in (("a", 1.0), ("b", 3.0))
        ]
        ds = Dataset.from_transitions(transitions, grid)
        scaled, _ = standardize_states(ds)
        assert np.allclose(np.sort(scaled.states[:, 0]), [-1.0, 1.0])

    def test_moments_after_scaling(self, rng, grid):
        ds = make_dataset(rng, grid, n_subjects=8, n_steps=5, state_dim=6)
        scaled, _ = standardize_states(ds)
        stacked = scaled.states
        assert np.all(np.abs(stacked.mean(axis=0)) < 1e-12)
        assert np.all(np.abs(stacked.std(axis=0) - 1.0) < 1e-12)

    def test_inversion_recovers_originals(self, rng, grid):
        ds = make_dataset(rng, grid, state_dim=4)
        scaled, record = standardize_states(ds)
        for tr, tr2 in zip(ds.transitions, scaled.transitions):
            back = record.invert(tr2.state.components)
            assert np.all(np.abs(back - tr.state.components) < 1e-10)

    def test_append_intercept(self, rng, grid):
        ds = make_dataset(rng, grid, state_dim=3)
        ds2 = append_intercept(ds)
        assert ds2.state_dim == 4
        assert np.all(ds2.states[:, -1] == 1.0)
        assert ds2.transitions[0].state.includes_intercept


class TestDataset:
    def test_rejects_mixed_grids(self, rng, grid):
        other = Grid.uniform(51)
        tr1 = Transition(
            state=State([0.0]),
            action=GridFunction(grid, np.zeros(len(grid))),
            reward=0.1,
            next_state=State([1.0]),
            subject_id="a",
            time_index=0,
        )
        tr2 = Transition(
            state=State([0.0]),
            action=GridFunction(other, np.zeros(len(other))),
            reward=0.1,
            next_state=State([1.0]),
            subject_id="a",
            time_index=1,
        )
        with pytest.raises(ValueError, match="share the dataset grid"):
            Dataset.from_transitions([tr1, tr2], grid)

    def test_rejects_empty(self, grid):
        with pytest.raises(ValueError):
            Dataset(transitions=(), initial_states=(), grid=grid)

    def test_initial_states_derived_from_earliest(self, rng, grid):
        ds = make_dataset(rng, grid, n_subjects=4, n_steps=3)
        assert len(ds.initial_states) == 4
        firsts = {
            tr.subject_id: tr.state
            for tr in ds.transitions
            if tr.time_index == 0
        }
        for sid, state in zip(sorted(firsts), ds.initial_states):
            assert np.array_equal(state.components, firsts[sid].components)

    def test_subject_subset(self, rng, grid):
        ds = make_dataset(rng, grid, n_subjects=4, n_steps=3)
        sub = ds.subset_by_subjects(["s000", "s002"])
        assert sub.subject_ids == ("s000", "s002")
        assert len(sub) == 6

    def test_csv_round_trip_bit_identical(self, rng, grid, tmp_path):
        ds = make_dataset(rng, grid, n_subjects=3, n_steps=4, state_dim=5)
        paths = save_dataset(ds, tmp_path)
        loaded = load_dataset(tmp_path)
        assert np.array_equal(loaded.states, ds.states)
        assert np.array_equal(loaded.actions, ds.actions)
        assert np.array_equal(loaded.rewards, ds.rewards)
        # re-export is byte-identical
        second = tmp_path / "again"
        save_dataset(loaded, second)
        for p in paths:
            assert (second / p.name).read_bytes() == p.read_bytes()

    def test_anchor_round_trip(self, rng, grid, tmp_path):
        ds = make_dataset(rng, grid, n_subjects=2, n_steps=3)
        anchors = rng.uniform(100, 500, size=len(ds))
        ds2 = Dataset.from_transitions(ds.transitions, grid, action_anchors=anchors)
        save_dataset(ds2, tmp_path)
        loaded = load_dataset(tmp_path)
        assert np.array_equal(loaded.action_anchors, anchors)


class TestRunConfig:
    def test_validation(self):
        with pytest.raises(ValueError):
            RunConfig(gamma=1.0)
        with pytest.raises(ValueError):
            RunConfig(iterations=0)
        with pytest.raises(ValueError):
            RunConfig(ridge=0.0)

    def test_json_round_trip(self, tmp_path):
        cfg = RunConfig(gamma=0.7, iterations=12, ridge=1e-4, seed=9)
        path = tmp_path / "cfg.json"
        cfg.to_json(path)
        assert RunConfig.from_json(path) == cfg

    def test_unknown_field_rejected(self):
        with pytest.raises(ValueError, match="unknown config fields"):
            RunConfig.from_dict({"gamma": 0.5, "bogus": 1})

    def test_q_upper_bound_scales_with_reward_max(self):
        assert RunConfig(gamma=0.8, reward_max=2.0).q_upper_bound == pytest.approx(10.0)
