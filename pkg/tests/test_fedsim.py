import io
import math

import numpy as np
import pytest
from hypothesis import given, settings
from hypothesis import strategies as st

from stgia.attack import AttackConfig
from stgia.dataio import Trajectory, constrained_domain_for, synthesize_trajectories
from stgia.defense import DefensePlan, RiskProfile, RiskSource
from stgia.errors import ConfigurationError, InputError
from stgia.fedsim import (
    ClientState,
    dump_transcript,
    fedavg_aggregate,
    local_update,
    read_transcript,
    run_training,
    truth_inputs_map,
    write_transcript,
)
from stgia.geo import generate_grid_network
from stgia.model import CellGrid, ModelSpec, TrainingWindow, forward, param_gradient

NET = generate_grid_network(6, 6, 500.0)
SPEC = ModelSpec(window_len=2, hidden_units=5, num_cells=9, coordinate_scale=NET.diagonal())


def make_clients(n, length, seed=0, eta=0.5, step=400.0, domain_radius=None):
    trajs = synthesize_trajectories(NET, n, length, seed=seed, step_budget_m=step)
    out = []
    for i, tr in enumerate(trajs):
        dom = constrained_domain_for(tr, NET, domain_radius) if domain_radius else None
        out.append(ClientState(i, tr, eta, dom))
    return out


class TestLocalUpdate:
    def test_definition(self):
        rng = np.random.default_rng(0)
        params = rng.standard_normal(SPEC.num_params)
        win = TrainingWindow(rng.uniform(-500, 500, (2, 2)), 3)
        new_params, grad = local_update(SPEC, params, win, 0.1)
        assert np.allclose(new_params, params - 0.1 * grad, atol=1e-15)
        assert np.array_equal(grad, param_gradient(SPEC, params, win))

    def test_zero_rate_is_fixed_point(self):
        rng = np.random.default_rng(1)
        params = rng.standard_normal(SPEC.num_params)
        win = TrainingWindow(rng.uniform(-500, 500, (2, 2)), 0)
        new_params, grad = local_update(SPEC, params, win, 0.0)
        assert np.array_equal(new_params, params)
        assert np.linalg.norm(grad) > 0

    def test_zero_gradient_window_is_fixed_point(self):
        rng = np.random.default_rng(2)
        params = rng.standard_normal(SPEC.num_params)
        inputs = rng.uniform(-500, 500, (2, 2))
        logits = forward(SPEC, params, inputs)
        win = TrainingWindow(inputs, logits.copy())  # softmax residual is zero
        new_params, grad = local_update(SPEC, params, win, 0.5)
        assert np.allclose(new_params, params, atol=1e-12)
        assert np.max(np.abs(grad)) <= 1e-12


class TestFedAvg:
    def test_average_of_equals(self):
        u = np.array([1.0, 2.0, 3.0])
        assert np.array_equal(fedavg_aggregate([u, u.copy(), u.copy()], [1, 5, 2]), u)

    def test_two_clients_equal_weights(self):
        out = fedavg_aggregate([np.array([1.0, 3.0]), np.array([3.0, 5.0])], [1.0, 1.0])
        assert np.array_equal(out, np.array([2.0, 4.0]))

    def test_degenerate_weight(self):
        a, b = np.array([1.0, 1.0]), np.array([9.0, 9.0])
        assert np.array_equal(fedavg_aggregate([a, b], [1.0, 0.0]), a)

    def test_empty_rejected(self):
        with pytest.raises(InputError):
            fedavg_aggregate([], [])

    def test_zero_weight_sum_rejected(self):
        with pytest.raises(InputError):
            fedavg_aggregate([np.ones(2)], [0.0])

    def test_negative_weight_rejected(self):
        with pytest.raises(InputError):
            fedavg_aggregate([np.ones(2), np.ones(2)], [1.0, -0.5])

    @settings(max_examples=30, deadline=None)
    @given(
        seed=st.integers(min_value=0, max_value=9999),
        alpha=st.floats(min_value=-5, max_value=5, allow_nan=False),
    )
    def test_linearity(self, seed, alpha):
        rng = np.random.default_rng(seed)
        updates = [rng.standard_normal(6) for _ in range(3)]
        weights = list(rng.uniform(0.1, 2.0, 3))
        lhs = fedavg_aggregate([alpha * u for u in updates], weights)
        rhs = alpha * fedavg_aggregate(updates, weights)
        assert np.allclose(lhs, rhs, atol=1e-9)


class TestRunTraining:
    def test_single_round_single_client(self):
        clients = make_clients(1, 6)
        transcript = run_training(clients, SPEC, NET, 1, seed=0)
        assert len(transcript.rounds) == 1
        rec = transcript.rounds[0]
        assert len(rec.entries) == 1
        grad = rec.entries[0].shared_gradient
        expected = param_gradient(SPEC, rec.global_params_before, rec.entries[0].truth_window)
        assert np.array_equal(grad, expected)

    def test_determinism_byte_identical(self):
        clients = make_clients(3, 10, seed=4)
        a = run_training(clients, SPEC, NET, 4, seed=9)
        b = run_training(make_clients(3, 10, seed=4), SPEC, NET, 4, seed=9)
        buf_a, buf_b = io.StringIO(), io.StringIO()
        dump_transcript(a, buf_a)
        dump_transcript(b, buf_b)
        assert buf_a.getvalue() == buf_b.getvalue()

    def test_identical_clients_share_round1_gradients(self):
        trajs = synthesize_trajectories(NET, 1, 8, seed=5)
        twin = Trajectory("twin", trajs[0].times, trajs[0].points)
        clients = [ClientState(0, trajs[0], 0.5), ClientState(1, twin, 0.5)]
        transcript = run_training(clients, SPEC, NET, 1, seed=1)
        g0, g1 = (e.shared_gradient for e in transcript.rounds[0].entries)
        assert np.array_equal(g0, g1)

    def test_undefended_gradients_exact(self):
        clients = make_clients(2, 8, seed=6)
        transcript = run_training(clients, SPEC, NET, 3, seed=2)
        for rec in transcript.rounds:
            for entry in rec.entries:
                expected = param_gradient(SPEC, rec.global_params_before, entry.truth_window)
                assert np.array_equal(entry.shared_gradient, expected)
                assert not entry.defended
                assert entry.epsilon_used is None

    def test_insufficient_trajectory_names_client(self):
        clients = make_clients(2, 5, seed=7)
        with pytest.raises(ConfigurationError, match="client 0"):
            run_training(clients, SPEC, NET, 10, seed=0)

    def test_window_schedule(self):
        clients = make_clients(1, 8, seed=8)
        transcript = run_training(clients, SPEC, NET, 3, seed=3)
        traj = clients[0].trajectory
        grid = CellGrid.from_bbox(NET.bounding_box(), SPEC.num_cells)
        for rec in transcript.rounds:
            t = rec.round_t
            win = rec.entries[0].truth_window
            assert np.array_equal(win.inputs, traj.points[t - 1 : t + 1])
            nxt = traj.points[t + 1]
            assert win.label == grid.cell_index(nxt[0], nxt[1])

    def test_params_stay_finite(self):
        clients = make_clients(3, 25, seed=9, eta=1.0)
        transcript = run_training(clients, SPEC, NET, 20, seed=4)
        assert np.all(np.isfinite(transcript.rounds[-1].global_params_before))


class TestDefendedTraining:
    def test_dpsgd_marks_defended(self):
        clients = make_clients(2, 8, seed=10)
        plan = DefensePlan(mechanism="dpsgd", clip_norm=1.0, noise_multiplier=0.5)
        transcript = run_training(clients, SPEC, NET, 2, plan, seed=5)
        for rec in transcript.rounds:
            for entry in rec.entries:
                assert entry.defended
                truth_grad = param_gradient(SPEC, rec.global_params_before, entry.truth_window)
                assert not np.array_equal(entry.shared_gradient, truth_grad)

    def test_geoi_perturbs_inputs_not_gradient_rule(self):
        clients = make_clients(2, 8, seed=11)
        plan = DefensePlan(mechanism="geoi", eps_per_meter=0.01)
        transcript = run_training(clients, SPEC, NET, 2, plan, seed=6)
        entry = transcript.rounds[0].entries[0]
        assert entry.defended
        assert entry.epsilon_used == 0.01

    def test_geogi_outputs_nodes(self):
        clients = make_clients(2, 8, seed=12)
        plan = DefensePlan(mechanism="geogi", eps_per_meter=0.001)
        transcript = run_training(clients, SPEC, NET, 2, plan, seed=7)
        assert transcript.rounds[0].entries[0].defended

    def test_pgem_adaptive_profile_mode(self):
        clients = make_clients(2, 8, seed=13, domain_radius=800.0)
        prof = RiskProfile()
        for t in range(1, 4):
            prof.set_round(t, 0.6, 40.0)
        plan = DefensePlan(
            mechanism="pgem_adaptive",
            total_epsilon=8.0,
            risk=RiskSource(mode="profile", profile=prof),
        )
        transcript = run_training(clients, SPEC, NET, 3, plan, seed=8)
        eps_seq = [rec.entries[0].epsilon_used for rec in transcript.rounds]
        assert all(e > 0 for e in eps_seq)
        assert sum(eps_seq) <= 8.0 + 1e-9
        gamma = 0.5 * 0.6 + 0.5 * (200 / 40)
        assert eps_seq[0] == pytest.approx(8.0 * math.exp(-gamma))
        # geometric decay of the remaining budget means decreasing allocations
        assert eps_seq[0] > eps_seq[1] > eps_seq[2]

    def test_pgem_profile_missing_rounds_rejected(self):
        clients = make_clients(1, 8, seed=14, domain_radius=800.0)
        prof = RiskProfile()
        prof.set_round(1, 0.5, 50.0)
        plan = DefensePlan(
            mechanism="pgem_adaptive", risk=RiskSource(mode="profile", profile=prof)
        )
        with pytest.raises(ConfigurationError, match="missing rounds"):
            run_training(clients, SPEC, NET, 3, plan, seed=9)

    def test_pgem_needs_domains(self):
        clients = make_clients(1, 8, seed=15)  # no constrained domain
        plan = DefensePlan(mechanism="pgem_adaptive")
        with pytest.raises(ConfigurationError, match="constrained domain"):
            run_training(clients, SPEC, NET, 2, plan, seed=10)

    def test_pgem_shadow_mode_runs(self):
        clients = make_clients(2, 8, seed=16, domain_radius=800.0)
        plan = DefensePlan(
            mechanism="pgem_adaptive",
            total_epsilon=6.0,
            risk=RiskSource(mode="shadow", shadow_attack=AttackConfig(max_iters=15, seed=0)),
        )
        transcript = run_training(clients, SPEC, NET, 3, plan, seed=11)
        eps_seq = [rec.entries[0].epsilon_used for rec in transcript.rounds]
        assert eps_seq[0] == pytest.approx(6.0)  # no risk measured before round 1
        assert all(e is not None for e in eps_seq)
        assert sum(eps_seq) <= 6.0 + 1e-9

    def test_budget_exhaustion_falls_back_to_uniform(self):
        clients = make_clients(1, 10, seed=17, domain_radius=800.0)
        prof = RiskProfile()
        for t in range(1, 5):
            prof.set_round(t, 0.0, None)  # gamma 0 every round: round 1 takes all
        plan = DefensePlan(
            mechanism="pgem_adaptive",
            total_epsilon=5.0,
            risk=RiskSource(mode="profile", profile=prof),
        )
        transcript = run_training(clients, SPEC, NET, 4, plan, seed=12)
        eps_seq = [rec.entries[0].epsilon_used for rec in transcript.rounds]
        assert eps_seq[0] == pytest.approx(5.0)
        assert eps_seq[1:] == [0.0, 0.0, 0.0]
        assert all(rec.entries[0].defended for rec in transcript.rounds)


class TestTranscriptIO:
    def test_round_trip(self, tmp_path):
        clients = make_clients(2, 9, seed=18)
        transcript = run_training(clients, SPEC, NET, 3, seed=13)
        path = tmp_path / "t.jsonl"
        write_transcript(transcript, path)
        loaded = read_transcript(path)
        assert loaded.spec == transcript.spec
        assert loaded.seed == transcript.seed
        assert loaded.num_rounds == transcript.num_rounds
        for ra, rb in zip(transcript.rounds, loaded.rounds):
            assert ra.round_t == rb.round_t
            assert np.array_equal(ra.global_params_before, rb.global_params_before)
            for ea, eb in zip(ra.entries, rb.entries):
                assert ea.client_id == eb.client_id
                assert np.array_equal(ea.shared_gradient, eb.shared_gradient)
                assert np.array_equal(ea.truth_window.inputs, eb.truth_window.inputs)
                assert ea.truth_window.label == eb.truth_window.label

    def test_truth_map_matches(self):
        clients = make_clients(2, 9, seed=19)
        transcript = run_training(clients, SPEC, NET, 2, seed=14)
        truth = truth_inputs_map(transcript)
        assert set(truth) == {(t, c) for t in (1, 2) for c in (0, 1)}
        assert truth[(1, 0)].shape == (2, 2)

    def test_empty_file_rejected(self, tmp_path):
        path = tmp_path / "empty.jsonl"
        path.write_text("")
        with pytest.raises(InputError):
            read_transcript(path)
