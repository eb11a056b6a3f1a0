"""Classical baseline filters: KF, EKF, UKF, and a bootstrap particle filter.

All steps are stateless functions over value beliefs; covariances emitted by
every update are audited against the package-wide symmetry/PSD tolerances.
"""
from __future__ import annotations

from dataclasses import dataclass

import numpy as np

from . import linalg
from .ssm import NominalModel


class DegenerateLikelihoodError(RuntimeError):
    """Every particle weight underflowed to zero."""


@dataclass
class GaussianBelief:
    mean: np.ndarray
    cov: np.ndarray


@dataclass
class ParticleBelief:
    particles: np.ndarray  # (N, d_x)
    weights: np.ndarray    # (N,), nonnegative, summing to 1

    @property
    def mean(self) -> np.ndarray:
        return self.weights @ self.particles

    @property
    def ess(self) -> float:
        return 1.0 / float(np.sum(self.weights ** 2))


def kf_step(belief: GaussianBelief, model: NominalModel, z) -> GaussianBelief:
    """One Kalman predict+update; requires a linear model."""
    if not model.is_linear:
        raise ValueError(f"kf_step needs a linear model, got '{model.name}'")
    return ekf_step(belief, model, z)


def ekf_step(belief: GaussianBelief, model: NominalModel, z) -> GaussianBelief:
    """One extended-Kalman predict+update (first-order propagation)."""
    x, P = belief.mean, belief.cov
    F = model.F_jac(x)
    x_pred = model.f(x)
    P_pred = linalg.symmetrize(F @ P @ F.T) + model.Q

    H = model.H_jac(x_pred)
    z_pred = model.h(x_pred)
    HP = H @ P_pred
    S = linalg.symmetrize(HP @ H.T) + model.R
    gain = linalg.solve_spd(S, HP, "innovation covariance").T
    x_new = x_pred + gain @ (np.asarray(z, dtype=float) - z_pred)
    P_new = linalg.symmetrize((np.eye(len(x)) - gain @ H) @ P_pred)
    linalg.audit_cov(P_new, "posterior covariance")
    return GaussianBelief(x_new, P_new)


def _sigma_points(x, P, alpha, beta, kappa):
    n = len(x)
    lam = alpha * alpha * (n + kappa) - n
    L = linalg.chol_psd((n + lam) * P, "sigma-point covariance")
    pts = np.empty((2 * n + 1, n))
    pts[0] = x
    pts[1:n + 1] = x + L.T
    pts[n + 1:] = x - L.T
    wm = np.full(2 * n + 1, 1.0 / (2.0 * (n + lam)))
    wc = wm.copy()
    wm[0] = lam / (n + lam)
    wc[0] = wm[0] + 1.0 - alpha * alpha + beta
    return pts, wm, wc


def ukf_step(belief: GaussianBelief, model: NominalModel, z,
             alpha: float = 1e-3, beta: float = 2.0, kappa: float = 0.0
             ) -> GaussianBelief:
    """One unscented predict+update with the standard 2n+1 sigma points."""
    x, P = belief.mean, belief.cov

    pts, wm, wc = _sigma_points(x, P, alpha, beta, kappa)
    fx = np.stack([np.asarray(model.f(p), dtype=float) for p in pts])
    x_pred = wm @ fx
    dx = fx - x_pred
    P_pred = linalg.symmetrize((dx.T * wc) @ dx) + model.Q

    pts, wm, wc = _sigma_points(x_pred, P_pred, alpha, beta, kappa)
    hz = np.stack([np.asarray(model.h(p), dtype=float) for p in pts])
    z_pred = wm @ hz
    dz = hz - z_pred
    S = linalg.symmetrize((dz.T * wc) @ dz) + model.R
    Pxz = ((pts - x_pred).T * wc) @ dz
    gain = linalg.solve_spd(S, Pxz.T, "innovation covariance").T
    x_new = x_pred + gain @ (np.asarray(z, dtype=float) - z_pred)
    P_new = linalg.symmetrize(P_pred - gain @ S @ gain.T)
    linalg.audit_cov(P_new, "posterior covariance")
    return GaussianBelief(x_new, P_new)


def init_particles(belief: GaussianBelief, n: int, rng) -> ParticleBelief:
    L = linalg.chol_psd(belief.cov, "initial covariance")
    pts = belief.mean + rng.standard_normal((n, len(belief.mean))) @ L.T
    return ParticleBelief(pts, np.full(n, 1.0 / n))


def _systematic_resample(weights, rng) -> np.ndarray:
    n = len(weights)
    positions = (rng.uniform() + np.arange(n)) / n
    return np.searchsorted(np.cumsum(weights), positions)


def pf_step(belief: ParticleBelief, model: NominalModel, z, rng
            ) -> ParticleBelief:
    """Bootstrap step: propagate, reweight by the measurement likelihood,
    systematically resample when the effective sample size drops below N/2."""
    n = belief.particles.shape[0]
    if n < 2:
        raise ValueError("particle filter needs at least two particles")
    Lq = linalg.chol_psd(model.Q, "process noise covariance")
    noise = rng.standard_normal((n, model.d_x)) @ Lq.T
    pts = np.stack([np.asarray(model.f(p), dtype=float) for p in belief.particles])
    pts = pts + noise

    z = np.asarray(z, dtype=float)
    innov = np.stack([z - np.asarray(model.h(p), dtype=float) for p in pts])
    sol = linalg.solve_spd(model.R, innov.T, "measurement noise covariance")
    with np.errstate(over="ignore", invalid="ignore", divide="ignore"):
        log_lik = -0.5 * np.sum(innov.T * sol, axis=0)
        log_w = np.log(belief.weights) + log_lik
        peak = log_w.max()
        if not np.isfinite(peak):
            raise DegenerateLikelihoodError("all particle weights underflowed")
        w = np.exp(log_w - peak)
    total = w.sum()
    if not np.isfinite(total) or total <= 0.0:
        raise DegenerateLikelihoodError("all particle weights underflowed")
    w /= total

    out = ParticleBelief(pts, w)
    if out.ess < n / 2.0:
        idx = _systematic_resample(w, rng)
        out = ParticleBelief(pts[idx], np.full(n, 1.0 / n))
    return out


def run_gaussian(model: NominalModel, z_seq, init: GaussianBelief, step=ekf_step,
                 **kwargs):
    """Filter a measurement sequence (k = 1..K); returns stacked means/covs."""
    belief = init
    means, covs = [], []
    for k, z in enumerate(z_seq, start=1):
        try:
            belief = step(belief, model, z, **kwargs)
        except (linalg.SingularMatrixError, linalg.CovarianceError) as exc:
            raise type(exc)(f"step {k}: {exc}") from None
        means.append(belief.mean)
        covs.append(belief.cov)
    return np.stack(means), np.stack(covs)


def run_particle(model: NominalModel, z_seq, init: GaussianBelief, n: int, rng):
    """Particle-filter a measurement sequence; returns posterior-mean track."""
    belief = init_particles(init, n, rng)
    means = []
    for k, z in enumerate(z_seq, start=1):
        try:
            belief = pf_step(belief, model, z, rng)
        except DegenerateLikelihoodError as exc:
            raise DegenerateLikelihoodError(f"step {k}: {exc}") from None
        means.append(belief.mean)
    return np.stack(means)
