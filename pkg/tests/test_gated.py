import numpy as np
import pytest

import gatedfilter.autodiff as ad
from gatedfilter import linalg
from gatedfilter.filters import GaussianBelief, ekf_step, kf_step, run_gaussian
from gatedfilter.gated import (ABLATION_SCHEMES, GateBlock, GateDims, GateMask,
                               GateParams, build_input_mug, build_input_spg,
                               build_input_sug, filter_step, filter_trajectory,
                               init_params, load_checkpoint, memory_update_gate,
                               nn_forward, params_dims, save_checkpoint,
                               state_prediction_gate, state_update_gate,
                               zero_memory, MemoryState)
from gatedfilter.ssm import linear_benchmark, lorenz_benchmark, simulate
from gatedfilter.training import initial_beliefs, loss_trajectory

SIG1 = 1.0 / (1.0 + np.exp(-1.0))  # 0.7310585786300049


def zero_params(dims: GateDims) -> GateParams:
    blocks = []
    for name in ("c1", "c2", "f1", "f2", "h1", "h2"):
        n_in, n_out = dims.block_io(name)
        blocks.append(GateBlock(np.zeros((dims.hidden, n_in)), np.zeros(dims.hidden),
                                np.zeros((n_out, dims.hidden)), np.zeros(n_out)))
    return GateParams(*blocks)


class TestNnForward:
    def test_zero_network(self):
        dims = GateDims(2, 2, 4, 8)
        params = zero_params(dims)
        out = nn_forward(params.f1, np.ones(8))
        assert np.array_equal(out, np.zeros(2))

    def test_bias_passthrough(self):
        v = np.array([0.3, -0.8])
        block = GateBlock(np.zeros((2, 3)), np.zeros(2), np.eye(2), v)
        assert np.allclose(nn_forward(block, np.ones(3)), v)

    def test_against_loop_oracle(self):
        rng = np.random.default_rng(0)
        block = GateBlock(rng.standard_normal((5, 3)), rng.standard_normal(5),
                          rng.standard_normal((2, 5)), rng.standard_normal(2))
        x = rng.standard_normal(3)
        hidden = [np.tanh(sum(block.W1[i, j] * x[j] for j in range(3)) + block.b1[i])
                  for i in range(5)]
        expect = [sum(block.W2[i, j] * hidden[j] for j in range(5)) + block.b2[i]
                  for i in range(2)]
        assert np.allclose(nn_forward(block, x), expect, atol=1e-14)


class TestGateInputs:
    def test_mug_input_forced_values(self):
        mem = zero_memory(3)
        x = np.zeros(2)
        out = build_input_mug(mem, x)
        expect = np.concatenate([np.full(3, 0.5), np.full(3, SIG1), np.zeros(2)])
        assert np.allclose(out, expect, atol=1e-12)

    def test_mug_maxabs_part(self):
        mem = zero_memory(2)
        out = build_input_mug(mem, np.array([2.0, -4.0]))
        assert np.allclose(out[-2:], [0.5, -1.0])

    def test_mug_length(self):
        for d_c, d_x in ((2, 2), (6, 3), (8, 4)):
            out = build_input_mug(zero_memory(d_c), np.ones(d_x))
            assert out.shape == (2 * d_c + d_x,)

    def test_spg_input(self):
        out = build_input_spg(zero_memory(4))
        assert np.allclose(out, np.concatenate([np.full(4, 0.5), np.full(4, SIG1)]))
        assert out.shape == (8,)

    def test_spg_monotone_in_memory(self):
        base = build_input_spg(MemoryState(np.zeros(3), np.ones(3)))
        bumped = build_input_spg(MemoryState(np.array([0.0, 0.5, 0.0]), np.ones(3)))
        assert bumped[1] > base[1]
        assert bumped[0] == base[0] and bumped[2] == base[2]

    def test_sug_input(self):
        assert np.array_equal(build_input_sug(np.array([1.0, 1.0])), [1.0, 1.0])
        assert np.array_equal(build_input_sug(np.zeros(2)), np.zeros(2))
        assert np.allclose(build_input_sug(np.array([3.0, -6.0, 1.0])),
                           [0.5, -1.0, 1.0 / 6.0])


class TestMemoryGate:
    def test_zero_params_softplus_floor(self):
        dims = GateDims(2, 2, 4, 8)
        params = zero_params(dims)
        mem = memory_update_gate(params, zero_memory(4), np.ones(2), GateMask())
        assert np.allclose(mem.c_hat, np.zeros(4))
        assert np.allclose(mem.p_c, np.log(2.0) + 1e-6)

    def test_masked_is_input_independent(self):
        dims = GateDims(2, 2, 4, 8)
        params = init_params(dims, 0)
        mask = GateMask(use_mug=False)
        a = memory_update_gate(params, zero_memory(4), np.ones(2), mask)
        b = memory_update_gate(params, MemoryState(np.full(4, 9.0), np.full(4, 3.0)),
                               -5.0 * np.ones(2), mask)
        assert np.array_equal(a.c_hat, b.c_hat)
        assert np.array_equal(a.p_c, b.p_c)
        assert np.array_equal(a.c_hat, np.zeros(4))

    def test_fixed_params_double_implementation(self):
        rng = np.random.default_rng(1)
        dims = GateDims(2, 2, 3, 4)
        params = init_params(dims, 5)
        mem_prev = MemoryState(rng.standard_normal(3), np.abs(rng.standard_normal(3)) + 0.1)
        x_post = rng.standard_normal(2)
        got = memory_update_gate(params, mem_prev, x_post, GateMask())
        # independent reimplementation
        raw = np.concatenate([mem_prev.c_hat, mem_prev.p_c])
        sig = 1.0 / (1.0 + np.exp(-raw))
        psi = x_post / max(np.abs(x_post).max(), 1e-8)
        i_c = np.concatenate([sig, psi])
        c = params.c1.W2 @ np.tanh(params.c1.W1 @ i_c + params.c1.b1) + params.c1.b2
        p_raw = params.c2.W2 @ np.tanh(params.c2.W1 @ i_c + params.c2.b1) + params.c2.b2
        p = np.log1p(np.exp(p_raw)) + 1e-6
        assert np.allclose(got.c_hat, c, atol=1e-12)
        assert np.allclose(got.p_c, p, atol=1e-12)


class TestPredictionGate:
    def test_masked_equals_kf_prediction(self):
        _, model = linear_benchmark(10.0, 0.5, 1.0, 10)
        params = init_params(GateDims(2, 2, 4, 8), 0)
        belief = GaussianBelief(np.array([1.0, -0.5]), 0.7 * np.eye(2))
        pred, (df, pf) = state_prediction_gate(params, belief, zero_memory(4),
                                               model, GateMask(use_spg=False))
        F = model.F_jac(belief.mean)
        assert df is None and pf is None
        assert np.allclose(pred.mean, F @ belief.mean, atol=1e-15)
        assert np.allclose(pred.cov, linalg.symmetrize(F @ belief.cov @ F.T) + model.Q,
                           atol=1e-15)

    def test_zero_params_variance_inflation_exact(self):
        _, model = linear_benchmark(0.0, 0.5, 1.0, 10)
        dims = GateDims(2, 2, 4, 8)
        params = zero_params(dims)
        belief = GaussianBelief(np.zeros(2), np.eye(2))
        pred_open, (df, pf) = state_prediction_gate(params, belief, zero_memory(4),
                                                    model, GateMask())
        pred_masked, _ = state_prediction_gate(params, belief, zero_memory(4),
                                               model, GateMask(use_spg=False))
        assert np.array_equal(df, np.zeros(2))
        inflation = pred_open.cov - pred_masked.cov
        assert np.allclose(np.diag(inflation), np.log(2.0) + 1e-6, atol=1e-12)
        assert np.allclose(inflation - np.diag(np.diag(inflation)), 0.0)


class TestUpdateGate:
    def test_full_masked_step_matches_kf(self):
        scen, model = linear_benchmark(10.0, 0.5, 1.0, 20)
        traj = simulate(scen, [9, 0])
        params = init_params(GateDims(2, 2, 4, 8), 1)
        init = initial_beliefs([traj], 1.0, 9)[0]
        mask = GateMask(False, False, False)
        run = filter_trajectory(params, model, traj.z[1:], init, mask)
        km, kc = run_gaussian(model, traj.z[1:], init, step=kf_step)
        assert np.abs(run.means_array() - km).max() < 1e-10
        assert np.abs(run.covs_array() - kc).max() < 1e-10

    def test_zero_innovation_keeps_mean(self):
        _, model = linear_benchmark(0.0, 0.5, 1.0, 10)
        params = zero_params(GateDims(2, 2, 4, 8))
        pred = GaussianBelief(np.array([0.4, 0.6]), 0.5 * np.eye(2))
        z = model.h(pred.mean)  # delta_h is zero for zero params
        post, _, _ = state_update_gate(params, pred, z, model, GateMask())
        assert np.allclose(post.mean, pred.mean, atol=1e-13)

    def test_huge_observation_variance_discounts_measurement(self):
        _, model = linear_benchmark(0.0, 0.5, 1.0, 10)
        dims = GateDims(2, 2, 4, 8)
        params = zero_params(dims)
        # drive the observation-variance head to emit ~1e12
        params.h2.b2[:] = 27.7  # softplus(27.7) ~ 27.7
        params.h2.W2[:] = 0.0
        big = GateParams(params.c1, params.c2, params.f1, params.f2,
                         params.h1, GateBlock(params.h2.W1, params.h2.b1,
                                              params.h2.W2, np.full(2, 1e12)))
        pred = GaussianBelief(np.array([0.4, 0.6]), 0.5 * np.eye(2))
        z = np.array([50.0, -30.0])
        post, _, _ = state_update_gate(big, pred, z, model, GateMask())
        assert np.abs(post.mean - pred.mean).max() < 1e-6
        assert np.abs(post.cov - pred.cov).max() < 1e-6

    def test_variance_inflation_weakly_decreases_gain(self):
        rng = np.random.default_rng(2)
        _, model = linear_benchmark(10.0, 0.5, 1.0, 10)
        H = model.H_jac(np.zeros(2))
        for _ in range(20):
            a = rng.standard_normal((2, 2))
            P = a @ a.T + 0.1 * np.eye(2)
            p_h = np.abs(rng.standard_normal(2))
            for j in range(2):
                bumped = p_h.copy()
                bumped[j] += 1.0
                def gain(ph):
                    S = linalg.symmetrize(H @ P @ H.T) + model.R + np.diag(ph)
                    return linalg.solve_spd(S, H @ P).T
                g0 = np.linalg.norm(gain(p_h)[:, j])
                g1 = np.linalg.norm(gain(bumped)[:, j])
                assert g1 <= g0 + 1e-12


class TestFilterTrajectory:
    def test_nonlinear_masked_equals_ekf(self):
        scen, model = lorenz_benchmark(10.0, 0.1, 1.0, 30)
        traj = simulate(scen, [10, 0])
        params = init_params(GateDims(3, 3, 6, 8), 2)
        init = initial_beliefs([traj], 1.0, 10)[0]
        run = filter_trajectory(params, model, traj.z[1:], init,
                                GateMask(False, False, False))
        em, ec = run_gaussian(model, traj.z[1:], init, step=ekf_step)
        assert np.abs(run.means_array() - em).max() < 1e-10
        assert np.abs(run.covs_array() - ec).max() < 1e-10

    def test_k1_equals_single_step(self):
        scen, model = linear_benchmark(10.0, 0.5, 1.0, 5)
        traj = simulate(scen, [11, 0])
        params = init_params(GateDims(2, 2, 4, 8), 3)
        init = initial_beliefs([traj], 1.0, 11)[0]
        run = filter_trajectory(params, model, traj.z[1:2], init, GateMask())
        belief, mem, out = filter_step(params, model, init, zero_memory(4),
                                       traj.z[1], GateMask())
        assert np.array_equal(run.means_array()[0], belief.mean)
        assert np.array_equal(run.covs_array()[0], belief.cov)

    def test_determinism_bit_identical(self):
        scen, model = linear_benchmark(10.0, 0.5, 1.0, 10)
        traj = simulate(scen, [12, 0])
        params = init_params(GateDims(2, 2, 4, 8), 4)
        init = initial_beliefs([traj], 1.0, 12)[0]
        a = filter_trajectory(params, model, traj.z[1:], init, GateMask())
        b = filter_trajectory(params, model, traj.z[1:], init, GateMask())
        assert np.array_equal(a.means_array(), b.means_array())
        assert np.array_equal(a.covs_array(), b.covs_array())

    def test_diagnostics_shapes_and_hygiene(self):
        scen, model = linear_benchmark(10.0, 0.5, 1.0, 10)
        traj = simulate(scen, [13, 0])
        params = init_params(GateDims(2, 2, 4, 8), 5)
        init = initial_beliefs([traj], 1.0, 13)[0]
        linalg.reset_audit_stats()
        run = filter_trajectory(params, model, traj.z[1:], init, GateMask())
        assert len(run.outputs) == traj.K
        for out, mem in zip(run.outputs, run.memories):
            assert out.delta_f.shape == (2,) and out.p_f.shape == (2,)
            assert out.delta_h.shape == (2,) and out.p_h.shape == (2,)
            assert (out.p_f > 0).all() and (out.p_h > 0).all()
            assert (mem.p_c > 0).all()
        assert linalg.audit_stats["violations"] == 0
        assert linalg.audit_stats["checked"] > 0

    def test_gradients_through_full_trajectory(self):
        # analytic BPTT gradients vs central differences at K=5
        scen, model = linear_benchmark(10.0, 0.5, 1.0, 5)
        mask = GateMask()
        for seed in range(3):
            traj = simulate(scen, [seed, 0])
            params = init_params(GateDims(2, 2, 4, 4), seed)
            init = initial_beliefs([traj], 1.0, seed)[0]

            def build(arrays):
                return loss_trajectory(params.with_flat(arrays), model, traj,
                                       init, mask, tau=1e-4)

            err = ad.grad_check(build, [np.array(a) for a in params.flat()])
            assert err < 1e-4, f"seed {seed}: {err}"

    def test_one_step_gradient(self):
        scen, model = linear_benchmark(10.0, 0.5, 1.0, 1)
        traj = simulate(scen, [42, 0])
        params = init_params(GateDims(2, 2, 4, 4), 21)
        init = initial_beliefs([traj], 1.0, 42)[0]

        def build(arrays):
            return loss_trajectory(params.with_flat(arrays), model, traj, init,
                                   GateMask(), tau=0.0)

        assert ad.grad_check(build, [np.array(a) for a in params.flat()]) < 1e-4


class TestCheckpoints:
    def test_round_trip(self, tmp_path):
        dims = GateDims(2, 2, 4, 8)
        params = init_params(dims, 6)
        path = tmp_path / "ckpt.json"
        save_checkpoint(path, params, dims)
        loaded, dims2 = load_checkpoint(path)
        assert dims2 == dims
        for a, b in zip(params.flat(), loaded.flat()):
            assert np.array_equal(a, b)

    def test_shape_mismatch_rejected(self, tmp_path):
        dims = GateDims(2, 2, 4, 8)
        params = init_params(dims, 7)
        path = tmp_path / "ckpt.json"
        save_checkpoint(path, params, dims)
        import json
        payload = json.loads(path.read_text())
        payload["dims"]["hidden"] = 16
        path.write_text(json.dumps(payload))
        with pytest.raises(ValueError, match="shape"):
            load_checkpoint(path)

    def test_ablation_schemes_cover_the_four_maskings(self):
        assert set(ABLATION_SCHEMES) == {"full", "no_mug", "no_spg", "no_sug"}
        assert ABLATION_SCHEMES["full"] == GateMask(True, True, True)
        assert ABLATION_SCHEMES["no_mug"].use_mug is False
        assert ABLATION_SCHEMES["no_spg"].use_spg is False
        assert ABLATION_SCHEMES["no_sug"].use_sug is False
