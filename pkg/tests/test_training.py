import numpy as np
import pytest

import gatedfilter.autodiff as ad
from gatedfilter.datasets import TrajectoryDataset, Trajectory, split_tags
from gatedfilter.filters import run_gaussian, kf_step
from gatedfilter.gated import GateDims, GateMask, init_params, filter_trajectory
from gatedfilter.metrics import mse_db, rmse
from gatedfilter.ssm import linear_benchmark, simulate
from gatedfilter.training import (TrainConfig, evaluate, initial_beliefs,
                                  loss_batch, loss_trajectory, train)


def small_dataset(theta=10.0, q=0.5, r=1.0, K=8, n=24, seed=100):
    scen, nominal = linear_benchmark(theta, q, r, K)
    trajs = [simulate(scen, [seed, i]) for i in range(n)]
    return TrajectoryDataset(trajs, split_tags(n, [0.75, 0.125, 0.125])), nominal


class TestLoss:
    def test_perfect_estimates_zero_loss(self):
        # truth doctored to equal the filter's own output: mse term vanishes
        ds, nominal = small_dataset()
        traj = ds.items[0]
        params = init_params(GateDims(2, 2, 4, 8), 0)
        init = initial_beliefs([traj], 1.0, 100)[0]
        run = filter_trajectory(params, nominal, traj.z[1:], init, GateMask())
        doctored = Trajectory(np.vstack([traj.x[:1], run.means_array()]), traj.z)
        assert loss_trajectory(params, nominal, doctored, init, GateMask(),
                               tau=0.0) == 0.0

    def test_regularizer_exact_on_zero_error(self):
        ds, nominal = small_dataset()
        traj = ds.items[0]
        params = init_params(GateDims(2, 2, 4, 8), 1)
        init = initial_beliefs([traj], 1.0, 100)[0]
        run = filter_trajectory(params, nominal, traj.z[1:], init, GateMask())
        doctored = Trajectory(np.vstack([traj.x[:1], run.means_array()]), traj.z)
        tau = 3e-3
        expected = tau * sum(float(np.sum(a * a)) for a in params.flat())
        got = loss_trajectory(params, nominal, doctored, init, GateMask(), tau=tau)
        assert abs(got - expected) < 1e-12

    def test_k2_hand_computed(self):
        scen, nominal = linear_benchmark(10.0, 0.5, 1.0, 2)
        traj = simulate(scen, [101, 0])
        params = init_params(GateDims(2, 2, 4, 8), 2)
        init = initial_beliefs([traj], 1.0, 101)[0]
        run = filter_trajectory(params, nominal, traj.z[1:], init, GateMask())
        e1 = run.means_array()[0] - traj.x[1]
        e2 = run.means_array()[1] - traj.x[2]
        tau = 1e-4
        by_hand = ((e1 @ e1 + e2 @ e2) / 2.0
                   + tau * sum(float(np.sum(a * a)) for a in params.flat()))
        got = loss_trajectory(params, nominal, traj, init, GateMask(), tau=tau)
        assert abs(got - by_hand) < 1e-12

    def test_batch_of_one_equals_trajectory(self):
        ds, nominal = small_dataset()
        traj = ds.items[0]
        params = init_params(GateDims(2, 2, 4, 8), 3)
        init = initial_beliefs([traj], 1.0, 100)[0]
        single = loss_trajectory(params, nominal, traj, init, GateMask(), 1e-4)
        batch = loss_batch(params, nominal, [traj], [init], GateMask(), 1e-4)
        assert single == batch

    def test_duplicate_item_mean_invariance(self):
        ds, nominal = small_dataset()
        traj = ds.items[0]
        params = init_params(GateDims(2, 2, 4, 8), 4)
        init = initial_beliefs([traj], 1.0, 100)[0]
        once = loss_batch(params, nominal, [traj], [init], GateMask(), 1e-4)
        twice = loss_batch(params, nominal, [traj, traj], [init, init],
                           GateMask(), 1e-4)
        assert abs(once - twice) < 1e-12

    def test_three_item_mean(self):
        ds, nominal = small_dataset()
        params = init_params(GateDims(2, 2, 4, 8), 5)
        items = ds.items[:3]
        inits = initial_beliefs(items, 1.0, 100)
        singles = [loss_trajectory(params, nominal, t, b, GateMask(), 1e-4)
                   for t, b in zip(items, inits)]
        batch = loss_batch(params, nominal, items, inits, GateMask(), 1e-4)
        assert abs(batch - float(np.mean(singles))) < 1e-12

    def test_empty_batch_rejected(self):
        _, nominal = small_dataset()
        params = init_params(GateDims(2, 2, 4, 8), 6)
        with pytest.raises(ValueError, match="empty"):
            loss_batch(params, nominal, [], [], GateMask(), 1e-4)

    def test_batch_gradient_check(self):
        scen, nominal = linear_benchmark(10.0, 0.5, 1.0, 5)
        items = [simulate(scen, [102, i]) for i in range(2)]
        inits = initial_beliefs(items, 1.0, 102)
        params = init_params(GateDims(2, 2, 4, 4), 7)

        def build(arrays):
            return loss_batch(params.with_flat(arrays), nominal, items, inits,
                              GateMask(), 1e-4)

        assert ad.grad_check(build, [np.array(a) for a in params.flat()]) < 1e-4


class TestTrain:
    def test_zero_learning_rate_keeps_params(self):
        ds, nominal = small_dataset()
        dims = GateDims(2, 2, 4, 8)
        cfg = TrainConfig(learning_rate=0.0, batch_size=4, epochs=3, seed=5,
                          early_stop_patience=10)
        init = init_params(dims, 5)
        params, report = train(cfg, nominal, ds, GateMask(), dims, init=init)
        for a, b in zip(init.flat(), params.flat()):
            assert np.array_equal(a, b)
        assert report.epochs_run == 3

    def test_same_seed_identical_reports(self):
        ds, nominal = small_dataset()
        dims = GateDims(2, 2, 4, 8)
        cfg = TrainConfig(learning_rate=1e-3, batch_size=4, epochs=3, seed=6,
                          early_stop_patience=10)
        _, r1 = train(cfg, nominal, ds, GateMask(), dims)
        _, r2 = train(cfg, nominal, ds, GateMask(), dims)
        assert r1.to_payload() == r2.to_payload()

    def test_validation_loss_decreases(self):
        ds, nominal = small_dataset(n=40, K=10)
        dims = GateDims(2, 2, 4, 16)
        cfg = TrainConfig(learning_rate=2e-3, batch_size=8, epochs=10, seed=7,
                          early_stop_patience=20)
        _, report = train(cfg, nominal, ds, GateMask(), dims)
        assert report.epochs[-1]["val_loss"] < report.initial_val_loss

    def test_best_checkpoint_invariant(self):
        ds, nominal = small_dataset(n=30, K=6)
        dims = GateDims(2, 2, 4, 8)
        cfg = TrainConfig(learning_rate=3e-3, batch_size=8, epochs=6, seed=8,
                          early_stop_patience=20)
        _, report = train(cfg, nominal, ds, GateMask(), dims)
        losses = [report.initial_val_loss] + [r["val_loss"] for r in report.epochs]
        assert report.best_val_loss == min(losses)
        assert losses[report.best_epoch] == report.best_val_loss

    def test_small_step_does_not_increase_batch_loss(self):
        scen, nominal = linear_benchmark(10.0, 0.5, 1.0, 5)
        mask = GateMask()
        dims = GateDims(2, 2, 4, 8)
        from gatedfilter.training import _Adam
        worsened = 0
        for seed in range(20):
            items = [simulate(scen, [103, seed, i]) for i in range(2)]
            inits = initial_beliefs(items, 1.0, [103, seed])
            params = init_params(dims, seed)
            tape = ad.Tape()
            tracked = params.tracked(tape)
            loss0 = loss_batch(tracked, nominal, items, inits, mask, 1e-4)
            grads = tape.backward(loss0)
            opt = _Adam([np.shape(a) for a in params.flat()], 1e-6, 10.0)
            stepped = params.with_flat(
                opt.step(params.flat(), [grads[leaf] for leaf in tracked.flat()]))
            loss1 = loss_batch(stepped, nominal, items, inits, mask, 1e-4)
            if loss1 > loss0.value:
                worsened += 1
        assert worsened == 0

    def test_batch_size_validation(self):
        ds, nominal = small_dataset()
        dims = GateDims(2, 2, 4, 8)
        cfg = TrainConfig(batch_size=999)
        with pytest.raises(ValueError, match="batch_size"):
            train(cfg, nominal, ds, GateMask(), dims)


class TestEvaluate:
    def test_masked_gates_match_kf_metrics(self):
        ds, nominal = small_dataset(theta=0.0)
        test = ds.split("test")
        params = init_params(GateDims(2, 2, 4, 8), 9)
        res = evaluate(params, nominal, test, GateMask(False, False, False),
                       p0=1.0, seed=55, position_idx=(0,))
        inits = initial_beliefs(test, 1.0, 55)
        est = [run_gaussian(nominal, t.z[1:], b, step=kf_step)[0]
               for t, b in zip(test, inits)]
        tru = [t.x[1:] for t in test]
        assert abs(res["mse_db"] - mse_db(est, tru)) < 1e-10
        assert abs(res["rmse_full"] - rmse(est, tru)) < 1e-12
        assert abs(res["rmse_position"] - rmse(est, tru, (0,))) < 1e-12

    def test_metric_additivity_over_splits(self):
        ds, nominal = small_dataset(n=32)
        items = ds.items[:8]
        params = init_params(GateDims(2, 2, 4, 8), 10)
        whole = evaluate(params, nominal, items, GateMask(), seed=77)
        # per-trajectory mse recombines to the whole-split value
        parts = [10 ** (row["mse_db"] / 10.0) for row in whole["per_trajectory"]]
        assert abs(10 * np.log10(np.mean(parts)) - whole["mse_db"]) < 1e-9

    def test_empty_split_rejected(self):
        _, nominal = small_dataset()
        params = init_params(GateDims(2, 2, 4, 8), 11)
        with pytest.raises(ValueError, match="empty"):
            evaluate(params, nominal, [], GateMask())
