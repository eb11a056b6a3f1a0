"""End-to-end training of the gated filter by backpropagation through time.

The loss per trajectory is the time-averaged squared estimation error plus
an L2 penalty on all six parameter blocks; mini-batches average trajectory
losses. Gradients flow through the entire unrolled recursion, covariances
and SPD solves included. Optimization uses Adam-style per-parameter moment
estimates with global gradient-norm clipping. Everything is a pure function
of (seed, dataset, initial parameters): batch gradients accumulate
per-trajectory in index order, so serial and worker-parallel execution
produce bit-identical results.
"""
from __future__ import annotations

import multiprocessing
from concurrent.futures import ProcessPoolExecutor
from dataclasses import dataclass, field

import numpy as np

from . import autodiff as ad
from .datasets import Trajectory
from .filters import GaussianBelief
from .gated import (GateMask, GateParams, GateDims, filter_trajectory,
                    init_params, params_sumsq)
from .metrics import mse_db, rmse
from .ssm import NominalModel

ADAM_BETA1 = 0.9
ADAM_BETA2 = 0.999
ADAM_EPS = 1e-8

# Sub-stream tags for the master seed.
_STREAM_INIT = 0
_STREAM_SHUFFLE = 1
_STREAM_BELIEF = 2


class TrainingDivergedError(RuntimeError):
    """Training loss became non-finite."""


@dataclass
class TrainConfig:
    learning_rate: float = 1e-3
    batch_size: int = 8
    epochs: int = 50
    tau: float = 1e-4
    grad_clip_norm: float = 10.0
    seed: int = 0
    early_stop_patience: int = 20

    def validate(self, n_train: int) -> None:
        if not (1 <= self.batch_size <= n_train):
            raise ValueError(f"batch_size {self.batch_size} must be in "
                             f"[1, {n_train}]")
        if self.tau < 0:
            raise ValueError("tau must be nonnegative")
        if self.learning_rate < 0:
            raise ValueError("learning_rate must be nonnegative")
        if self.epochs < 0:
            raise ValueError("epochs must be nonnegative")


@dataclass
class TrainReport:
    """Per-epoch losses plus the best-on-validation checkpoint reference."""

    initial_val_loss: float
    epochs: list = field(default_factory=list)  # rows: epoch/train_loss/val_loss/val_rmse
    best_epoch: int = 0          # 0 means the initialization
    best_val_loss: float = 0.0
    epochs_run: int = 0
    stopped_early: bool = False

    def to_payload(self) -> dict:
        return {
            "initial_val_loss": self.initial_val_loss,
            "epochs": self.epochs,
            "best_epoch": self.best_epoch,
            "best_val_loss": self.best_val_loss,
            "epochs_run": self.epochs_run,
            "stopped_early": self.stopped_early,
        }


def initial_belief(traj: Trajectory, p0: float, rng) -> GaussianBelief:
    """Initial posterior: true x0 perturbed by N(0, p0 I), covariance p0 I."""
    d = traj.d_x
    mean = traj.x[0] + np.sqrt(p0) * rng.standard_normal(d)
    return GaussianBelief(mean, p0 * np.eye(d))


def initial_beliefs(items, p0: float, seed) -> list[GaussianBelief]:
    """Deterministic per-item initial beliefs derived from one seed."""
    return [initial_belief(t, p0, np.random.default_rng([seed, _STREAM_BELIEF, i]))
            for i, t in enumerate(items)]


def loss_trajectory(params: GateParams, model: NominalModel, traj: Trajectory,
                    init: GaussianBelief, mask: GateMask, tau: float):
    """Time-averaged squared error of the filtered track plus tau * ||params||^2."""
    run = filter_trajectory(params, model, traj.z[1:], init, mask)
    total = 0.0
    for k, mean in enumerate(run.means):
        total = ad.add(total, ad.sumsq(ad.sub(mean, traj.x[k + 1])))
    loss = ad.scale(total, 1.0 / traj.K)
    if tau > 0.0:
        loss = ad.add(loss, ad.scale(params_sumsq(params), tau))
    return loss


def loss_batch(params: GateParams, model: NominalModel, items, inits,
               mask: GateMask, tau: float):
    """Arithmetic mean of per-trajectory losses."""
    if not items:
        raise ValueError("empty batch")
    total = 0.0
    for traj, init in zip(items, inits):
        total = ad.add(total, loss_trajectory(params, model, traj, init, mask, tau))
    return ad.scale(total, 1.0 / len(items))


def _global_norm(grads) -> float:
    return float(np.sqrt(sum(float(np.sum(np.square(g))) for g in grads)))


def _traj_loss_grads(params: GateParams, model, traj, init, mask, tau):
    """Loss and flat gradient list for one trajectory (fresh tape)."""
    tape = ad.Tape()
    tracked = params.tracked(tape)
    loss = loss_trajectory(tracked, model, traj, init, mask, tau)
    grads = tape.backward(loss)
    return float(loss.value), [grads[leaf] for leaf in tracked.flat()]


# Trajectories per reduction chunk. The two-level (within-chunk, then
# across-chunk, both in index order) sum is the reference semantics for every
# execution mode, so results never depend on worker count.
_CHUNK = 4

# Context inherited by forked worker processes (set before pool creation).
_WORKER_CTX = None


def _chunk_sums(params, model, items, inits, mask, tau, indices):
    """Sum of per-trajectory losses/gradients over one index chunk."""
    total_loss = 0.0
    total = None
    for i in indices:
        loss, grads = _traj_loss_grads(params, model, items[i], inits[i],
                                       mask, tau)
        total_loss += loss
        total = grads if total is None else [a + b for a, b in zip(total, grads)]
    return total_loss, total


def _worker_loop(conn):
    ref, model, items, inits, mask, tau = _WORKER_CTX
    while True:
        msg = conn.recv()
        if msg is None:
            break
        arrays, chunk = msg
        conn.send(_chunk_sums(ref.with_flat(arrays), model, items, inits,
                              mask, tau, chunk))
    conn.close()


class _BatchGradients:
    """Chunked loss/gradient evaluation, serial or process-parallel.

    Parallel mode keeps persistent forked workers fed over pipes (the model
    closures are inherited through fork, so nothing unpicklable crosses the
    pipe). Chunk sums combine in index order either way, so both modes are
    bit-identical.
    """

    def __init__(self, params_ref, model, items, inits, mask, tau, n_jobs):
        self.serial_ctx = (params_ref, model, items, inits, mask, tau)
        self.workers: list = []
        self.conns: list = []
        if n_jobs > 1:
            global _WORKER_CTX
            try:
                ctx = multiprocessing.get_context("fork")
            except ValueError:
                return  # no fork on this platform: stay serial
            _WORKER_CTX = self.serial_ctx
            for _ in range(n_jobs):
                parent_conn, child_conn = ctx.Pipe()
                proc = ctx.Process(target=_worker_loop, args=(child_conn,),
                                   daemon=True)
                proc.start()
                child_conn.close()
                self.workers.append(proc)
                self.conns.append(parent_conn)

    def __call__(self, params: GateParams, indices):
        _, model, items, inits, mask, tau = self.serial_ctx
        chunks = [tuple(int(i) for i in indices[s:s + _CHUNK])
                  for s in range(0, len(indices), _CHUNK)]
        if not self.conns:
            results = [_chunk_sums(params, model, items, inits, mask, tau, c)
                       for c in chunks]
        else:
            # waves of one task per worker keep pipe buffers shallow
            arrays = params.flat()
            results = []
            n = len(self.conns)
            for start in range(0, len(chunks), n):
                wave = chunks[start:start + n]
                for conn, chunk in zip(self.conns, wave):
                    conn.send((arrays, chunk))
                for conn, _ in zip(self.conns, wave):
                    results.append(conn.recv())
        total_loss = 0.0
        total = None
        for loss, grads in results:
            total_loss += loss
            total = grads if total is None else [a + b for a, b in zip(total, grads)]
        inv = 1.0 / len(indices)
        return total_loss * inv, [g * inv for g in total]

    def close(self):
        for conn in self.conns:
            try:
                conn.send(None)
                conn.close()
            except (BrokenPipeError, OSError):
                pass
        for proc in self.workers:
            proc.join(timeout=5)
        self.workers, self.conns = [], []


class _Adam:
    def __init__(self, shapes, lr, clip):
        self.lr = lr
        self.clip = clip
        self.t = 0
        self.m = [np.zeros(s) for s in shapes]
        self.v = [np.zeros(s) for s in shapes]

    def step(self, arrays, grads):
        norm = _global_norm(grads)
        if self.clip > 0 and norm > self.clip:
            grads = [g * (self.clip / norm) for g in grads]
        self.t += 1
        c1 = 1.0 - ADAM_BETA1 ** self.t
        c2 = 1.0 - ADAM_BETA2 ** self.t
        out = []
        for i, (a, g) in enumerate(zip(arrays, grads)):
            self.m[i] = ADAM_BETA1 * self.m[i] + (1.0 - ADAM_BETA1) * g
            self.v[i] = ADAM_BETA2 * self.v[i] + (1.0 - ADAM_BETA2) * g * g
            out.append(a - self.lr * (self.m[i] / c1)
                       / (np.sqrt(self.v[i] / c2) + ADAM_EPS))
        return out


def train(config: TrainConfig, model: NominalModel, dataset, mask: GateMask,
          dims: GateDims, p0: float = 1.0,
          init: GateParams | None = None,
          n_jobs: int = 1) -> tuple[GateParams, TrainReport]:
    """Mini-batch training over the train split, checkpointed on validation.

    Returns the parameters with the minimum recorded validation loss (the
    initialization counts as epoch 0) and the per-epoch report. n_jobs > 1
    evaluates per-trajectory gradients in forked workers; results are
    bit-identical to the serial run.
    """
    train_items = dataset.split("train")
    val_items = dataset.split("val")
    if not train_items or not val_items:
        raise ValueError("training needs nonempty train and val splits")
    config.validate(len(train_items))

    params = init.copy() if init is not None else init_params(
        dims, [config.seed, _STREAM_INIT])
    shuffle_rng = np.random.default_rng([config.seed, _STREAM_SHUFFLE])
    train_inits = initial_beliefs(train_items, p0, config.seed)
    val_inits = initial_beliefs(val_items, p0, config.seed)

    def val_loss_of(p):
        return float(loss_batch(p, model, val_items, val_inits, mask, config.tau))

    def val_rmse_of(p):
        est, tru = [], []
        for traj, init_b in zip(val_items, val_inits):
            run = filter_trajectory(p, model, traj.z[1:], init_b, mask)
            est.append(run.means_array())
            tru.append(traj.x[1:])
        return rmse(est, tru)

    report = TrainReport(initial_val_loss=val_loss_of(params))
    best_params = params.copy()
    best_val = report.initial_val_loss
    since_best = 0

    opt = _Adam([np.shape(a) for a in params.flat()],
                config.learning_rate, config.grad_clip_norm)
    batch_grads = _BatchGradients(params, model, train_items, train_inits,
                                  mask, config.tau, n_jobs)
    try:
        for epoch in range(1, config.epochs + 1):
            perm = shuffle_rng.permutation(len(train_items))
            batch_losses = []
            for start in range(0, len(perm), config.batch_size):
                idx = perm[start:start + config.batch_size]
                loss, grads = batch_grads(params, idx)
                if not np.isfinite(loss):
                    raise TrainingDivergedError(
                        f"epoch {epoch}, batch {start // config.batch_size}: "
                        f"loss {loss!r}")
                params = params.with_flat(opt.step(params.flat(), grads))
                batch_losses.append(loss)

            v_loss = val_loss_of(params)
            report.epochs.append({
                "epoch": epoch,
                "train_loss": float(np.mean(batch_losses)),
                "val_loss": v_loss,
                "val_rmse": val_rmse_of(params),
            })
            report.epochs_run = epoch
            if v_loss < best_val:
                best_val = v_loss
                best_params = params.copy()
                report.best_epoch = epoch
                since_best = 0
            else:
                since_best += 1
                if since_best >= config.early_stop_patience:
                    report.stopped_early = True
                    break
    finally:
        batch_grads.close()

    report.best_val_loss = best_val
    return best_params, report


def evaluate(params: GateParams, model: NominalModel, items, mask: GateMask,
             p0: float = 1.0, seed: int = 0,
             position_idx=None) -> dict:
    """Filter every trajectory of a split and report MSE[dB] and RMSE."""
    if not items:
        raise ValueError("empty evaluation split")
    inits = initial_beliefs(items, p0, seed)
    est, tru, per_traj = [], [], []
    for i, (traj, init_b) in enumerate(zip(items, inits)):
        run = filter_trajectory(params, model, traj.z[1:], init_b, mask)
        e, t = run.means_array(), traj.x[1:]
        est.append(e)
        tru.append(t)
        per_traj.append({"index": i, "mse_db": mse_db([e], [t]),
                         "rmse": rmse([e], [t])})
    return {
        "mse_db": mse_db(est, tru),
        "rmse_full": rmse(est, tru),
        "rmse_position": rmse(est, tru, position_idx),
        "n_trajectories": len(items),
        "per_trajectory": per_traj,
    }
