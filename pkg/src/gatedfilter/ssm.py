"""State-space models and mismatch-scenario generators.

A Scenario is the generative truth used for data synthesis; a NominalModel
is the (possibly mismatched) prior handed to the filters. Nominal f/h and
their Jacobians are written against the generic autodiff ops so the same
callables serve plain numpy evaluation and tape-tracked training; scenario
truth functions are plain numpy, they are only ever simulated.
"""
from __future__ import annotations

import math
from dataclasses import dataclass, field
from typing import Callable, Sequence

import numpy as np

from . import autodiff as ad
from .datasets import Trajectory
from .linalg import check_cov


class GeometryError(ValueError):
    """Measurement geometry is degenerate (e.g. radar at the origin)."""


@dataclass
class NominalModel:
    """Prior model given to the filters: maps, Jacobians, noise covariances."""

    d_x: int
    d_z: int
    f: Callable
    F_jac: Callable
    h: Callable
    H_jac: Callable
    Q: np.ndarray
    R: np.ndarray
    is_linear: bool = False
    name: str = ""

    def __post_init__(self):
        self.Q = check_cov(np.asarray(self.Q, dtype=float), "Q")
        self.R = check_cov(np.asarray(self.R, dtype=float), "R")
        if self.Q.shape != (self.d_x, self.d_x):
            raise ValueError(f"Q shape {self.Q.shape} != ({self.d_x}, {self.d_x})")
        if self.R.shape != (self.d_z, self.d_z):
            raise ValueError(f"R shape {self.R.shape} != ({self.d_z}, {self.d_z})")


@dataclass
class Scenario:
    """Generative truth: step/measurement functions plus noise scales.

    ``true_step(history, rng)`` returns the noiseless next state and may read
    any past state; ``true_meas(state, rng)`` returns the noiseless
    measurement. ``q_true``/``r_true`` are per-component noise standard
    deviations (scalar or vector); with both at zero, simulation from a fixed
    initial state is deterministic.
    """

    name: str
    d_x: int
    d_z: int
    true_step: Callable
    true_meas: Callable
    q_true: float | np.ndarray
    r_true: float | np.ndarray
    K: int
    x0_sampler: Callable
    position_idx: tuple[int, ...] = ()


def simulate(scenario: Scenario, rng_seed) -> Trajectory:
    """One trajectory (k = 0..K) of the scenario; pure function of the seed."""
    rng = np.random.default_rng(rng_seed)
    d_x, d_z = scenario.d_x, scenario.d_z
    x = np.asarray(scenario.x0_sampler(rng), dtype=float)
    xs = [x]
    zs = [np.asarray(scenario.true_meas(x, rng), dtype=float)
          + scenario.r_true * rng.standard_normal(d_z)]
    for _ in range(scenario.K):
        x = (np.asarray(scenario.true_step(xs, rng), dtype=float)
             + scenario.q_true * rng.standard_normal(d_x))
        xs.append(x)
        zs.append(np.asarray(scenario.true_meas(x, rng), dtype=float)
                  + scenario.r_true * rng.standard_normal(d_z))
    return Trajectory(np.stack(xs), np.stack(zs))


# ---------------------------------------------------------------------------
# rotations

def rotation2(theta_deg: float) -> np.ndarray:
    """2-D rotation matrix [[cos, -sin], [sin, cos]] for an angle in degrees."""
    t = math.radians(theta_deg)
    c, s = math.cos(t), math.sin(t)
    return np.array([[c, -s], [s, c]])


def rotation3_xy(theta_deg: float) -> np.ndarray:
    """3-D rotation of the first two coordinates; third coordinate fixed."""
    out = np.eye(3)
    out[:2, :2] = rotation2(theta_deg)
    return out


# ---------------------------------------------------------------------------
# linear benchmark: truth (F, H) vs a rotated nominal model

def _linear_fh(d_x: int = 2) -> tuple[np.ndarray, np.ndarray]:
    # F: ones on the diagonal and the first row; H: anti-diagonal plus first row.
    F = np.eye(d_x)
    F[0, :] = 1.0
    H = np.zeros((d_x, d_x))
    H[0, :] = 1.0
    for j in range(d_x):
        H[d_x - j - 1, j] = 1.0
    return F, H


def linear_model(theta_deg: float, q: float, r: float) -> NominalModel:
    """2-D linear model whose F and H are rotated by theta (degrees)."""
    F, H = _linear_fh(2)
    T = rotation2(theta_deg)
    F_rot, H_rot = T @ F, T @ H
    return NominalModel(
        d_x=2, d_z=2,
        f=lambda x: ad.matvec(F_rot, x),
        F_jac=lambda x: F_rot,
        h=lambda x: ad.matvec(H_rot, x),
        H_jac=lambda x: H_rot,
        Q=q * q * np.eye(2),
        R=r * r * np.eye(2),
        is_linear=True,
        name=f"linear(theta={theta_deg:g})",
    )


def linear_benchmark(theta_deg: float, q: float, r: float, K: int
                     ) -> tuple[Scenario, NominalModel]:
    """Linear scenario generated by the true (F, H); nominal model rotated.

    theta_deg = 0 gives a nominal model identical to the truth, for which
    the Kalman filter is MMSE-optimal.
    """
    F, H = _linear_fh(2)
    scenario = Scenario(
        name="linear",
        d_x=2, d_z=2,
        true_step=lambda hist, rng: F @ hist[-1],
        true_meas=lambda x, rng: H @ x,
        q_true=q, r_true=r, K=K,
        x0_sampler=lambda rng: rng.standard_normal(2),
        position_idx=(0,),
    )
    return scenario, linear_model(theta_deg, q, r)


# ---------------------------------------------------------------------------
# Lorenz system: truncated-series transition, rotated observation

# Drift matrix as a function of the state: constant part plus the part
# proportional to the first component.
_LORENZ_SIGMA = 10.0
_LORENZ_RHO = 8.0 / 3.0
_LORENZ_BETA = 28.0
_LORENZ_LIN = np.array([[-_LORENZ_SIGMA, _LORENZ_SIGMA, 0.0],
                        [_LORENZ_BETA, -1.0, 0.0],
                        [0.0, 0.0, -_LORENZ_RHO]])
_LORENZ_K1 = np.array([[0.0, 0.0, 0.0],
                       [0.0, 0.0, -1.0],
                       [0.0, 1.0, 0.0]])
_LORENZ_MIX = np.stack([_LORENZ_K1, np.zeros((3, 3)), np.zeros((3, 3))])
_E1 = np.array([1.0, 0.0, 0.0])


def lorenz_drift(x):
    """State-dependent drift matrix A(x)."""
    return ad.add(_LORENZ_LIN, ad.mix(x, _LORENZ_MIX))


def lorenz_transition(x, dt: float, order: int):
    """Discrete transition matrix: truncated series of exp(A(x) * dt).

    F = I + sum_{j=1..order} (A dt)^j / j!, accumulated by repeated
    right-multiplication.
    """
    if order < 1:
        raise ValueError("series order must be >= 1")
    m = ad.scale(lorenz_drift(x), float(dt))
    out = ad.add(np.eye(3), m)
    term = m
    for j in range(2, order + 1):
        term = ad.scale(ad.matmul(term, m), 1.0 / j)
        out = ad.add(out, term)
    return out


def lorenz_f(x, dt: float, order: int):
    """One nominal step: F(x) @ x."""
    return ad.matvec(lorenz_transition(x, dt, order), x)


def lorenz_f_jac(x, dt: float, order: int):
    """Exact Jacobian of x -> F(x) @ x for any series order.

    Uses y_j = A(x)^j x with dA/dx1 = K1 (the only state dependence of A):
    d(y_j)/dx = A d(y_{j-1})/dx + outer(K1 y_{j-1}, e1).
    """
    a = lorenz_drift(x)
    y = x
    jac_y = np.eye(3)
    total = np.eye(3)
    coeff = 1.0
    for j in range(1, order + 1):
        jac_y = ad.add(ad.matmul(a, jac_y), ad.outer(ad.matvec(_LORENZ_K1, y), _E1))
        y = ad.matvec(a, y)
        coeff *= dt / j
        total = ad.add(total, ad.scale(jac_y, coeff))
    return total


def lorenz_benchmark(theta_deg: float, q: float, r: float, K: int,
                     dt: float = 0.02, j_true: int = 5, j_nominal: int = 1
                     ) -> tuple[Scenario, NominalModel]:
    """Lorenz scenario: truth uses the order-j_true series and a rotated
    observation of the first two coordinates; the nominal model sees the
    order-j_nominal series and an identity observation."""
    R3 = rotation3_xy(theta_deg)
    scenario = Scenario(
        name="lorenz",
        d_x=3, d_z=3,
        true_step=lambda hist, rng: lorenz_transition(hist[-1], dt, j_true) @ hist[-1],
        true_meas=lambda x, rng: R3 @ x,
        q_true=q, r_true=r, K=K,
        x0_sampler=lambda rng: np.array([1.0, 1.0, 1.0])
        + math.sqrt(0.1) * rng.standard_normal(3),
        position_idx=(0, 1, 2),
    )
    nominal = NominalModel(
        d_x=3, d_z=3,
        f=lambda x: lorenz_f(x, dt, j_nominal),
        F_jac=lambda x: lorenz_f_jac(x, dt, j_nominal),
        h=lambda x: x,
        H_jac=lambda x: np.eye(3),
        Q=q * q * np.eye(3),
        R=r * r * np.eye(3),
        name=f"lorenz(order={j_nominal})",
    )
    return scenario, nominal


def lorenz_true_model(theta_deg: float, q: float, r: float, dt: float = 0.02,
                      j_true: int = 5) -> NominalModel:
    """The Lorenz generative truth packaged as a filterable model
    (accurate-model baselines)."""
    R3 = rotation3_xy(theta_deg)
    return NominalModel(
        d_x=3, d_z=3,
        f=lambda x: lorenz_f(x, dt, j_true),
        F_jac=lambda x: lorenz_f_jac(x, dt, j_true),
        h=lambda x: ad.matvec(R3, x),
        H_jac=lambda x: R3,
        Q=q * q * np.eye(3),
        R=r * r * np.eye(3),
        name=f"lorenz_true(order={j_true})",
    )


# ---------------------------------------------------------------------------
# constant-velocity / coordinated-turn dynamics with a radar observation

def cv_model(dt: float) -> np.ndarray:
    """Constant-velocity transition for the state [x, y, vx, vy]."""
    if dt < 0:
        raise ValueError("dt must be nonnegative")
    out = np.eye(4)
    out[0, 2] = dt
    out[1, 3] = dt
    return out


def ct_model(dt: float, omega_deg_s: float) -> np.ndarray:
    """Coordinated-turn transition for [x, y, vx, vy] at a fixed turn rate."""
    w = math.radians(omega_deg_s)
    if abs(w) < 1e-12:
        return cv_model(dt)
    swt, cwt = math.sin(w * dt), math.cos(w * dt)
    return np.array([
        [1.0, 0.0, swt / w, -(1.0 - cwt) / w],
        [0.0, 1.0, (1.0 - cwt) / w, swt / w],
        [0.0, 0.0, cwt, -swt],
        [0.0, 0.0, swt, cwt],
    ])


_RADAR_BASIS_CACHE: dict[int, np.ndarray] = {}


def _radar_basis(d_x: int) -> np.ndarray:
    basis = _RADAR_BASIS_CACHE.get(d_x)
    if basis is None:
        basis = np.zeros((4, 2, d_x))
        basis[0, 0, 0] = 1.0
        basis[1, 0, 1] = 1.0
        basis[2, 1, 0] = 1.0
        basis[3, 1, 1] = 1.0
        _RADAR_BASIS_CACHE[d_x] = basis
    return basis


def radar_h(x):
    """[radial distance, azimuth] of the leading position components."""
    px, py = ad.item(x, 0), ad.item(x, 1)
    d2 = ad.add(ad.emul(px, px), ad.emul(py, py))
    if float(ad.value_of(d2)) == 0.0:
        raise GeometryError("radar measurement undefined at the origin")
    return ad.vector([ad.sqrt(d2), ad.atan2(py, px)])


def radar_h_jac(x):
    """Analytic Jacobian of radar_h, zero-padded over velocity components."""
    d_x = np.shape(ad.value_of(x))[0]
    px, py = ad.item(x, 0), ad.item(x, 1)
    d2 = ad.add(ad.emul(px, px), ad.emul(py, py))
    if float(ad.value_of(d2)) == 0.0:
        raise GeometryError("radar Jacobian undefined at the origin")
    d = ad.sqrt(d2)
    coeffs = ad.vector([ad.ediv(px, d), ad.ediv(py, d),
                        ad.neg(ad.ediv(py, d2)), ad.ediv(px, d2)])
    return ad.mix(coeffs, _radar_basis(d_x))


def radar_benchmark(q: float, sigma_d: float, sigma_mu_deg: float, K: int,
                    dt: float = 4.0, omega_deg_s: float = 3.0
                    ) -> tuple[Scenario, NominalModel]:
    """Maneuvering-target scenario: truth turns at a fixed rate, the nominal
    model assumes constant velocity; both observe range/azimuth."""
    F_true = ct_model(dt, omega_deg_s)
    F_cv = cv_model(dt)
    sigma_mu = math.radians(sigma_mu_deg)
    x0_mean = np.array([30000.0, 20000.0, -120.0, 20.0])
    x0_std = np.array([200.0, 200.0, 10.0, 10.0])
    scenario = Scenario(
        name="cv_radar",
        d_x=4, d_z=2,
        true_step=lambda hist, rng: F_true @ hist[-1],
        true_meas=lambda x, rng: np.array(
            [math.hypot(x[0], x[1]), math.atan2(x[1], x[0])]),
        q_true=q,
        r_true=np.array([sigma_d, sigma_mu]),
        K=K,
        x0_sampler=lambda rng: x0_mean + x0_std * rng.standard_normal(4),
        position_idx=(0, 1),
    )
    nominal = NominalModel(
        d_x=4, d_z=2,
        f=lambda x: ad.matvec(F_cv, x),
        F_jac=lambda x: F_cv,
        h=radar_h,
        H_jac=radar_h_jac,
        Q=q * q * np.eye(4),
        R=np.diag([sigma_d ** 2, sigma_mu ** 2]),
        name="cv_radar",
    )
    return scenario, nominal


def radar_true_model(q: float, sigma_d: float, sigma_mu_deg: float,
                     dt: float = 4.0, omega_deg_s: float = 3.0) -> NominalModel:
    """Coordinated-turn truth with the radar observation (accurate-model
    baselines for the maneuvering scenario)."""
    F_true = ct_model(dt, omega_deg_s)
    sigma_mu = math.radians(sigma_mu_deg)
    return NominalModel(
        d_x=4, d_z=2,
        f=lambda x: ad.matvec(F_true, x),
        F_jac=lambda x: F_true,
        h=radar_h,
        H_jac=radar_h_jac,
        Q=q * q * np.eye(4),
        R=np.diag([sigma_d ** 2, sigma_mu ** 2]),
        name="ct_radar_true",
    )
