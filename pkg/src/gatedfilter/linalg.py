"""Dense small-matrix hygiene: symmetry, PSD checks, and SPD solves.

Everything operates on plain float64 numpy arrays (matrices 2-D, vectors
1-D). Covariance validity is a checked property rather than a wrapper type;
the tolerances below are the single source of truth for every filter in the
package.
"""
from __future__ import annotations

import numpy as np
from scipy.linalg import cho_factor, cho_solve

SYM_TOL = 1e-9
PSD_TOL = 1e-9
# Plain attempt first, then escalating diagonal jitter (relative to scale).
JITTER_LADDER = (0.0, 1e-12, 1e-9, 1e-6)


class ShapeError(ValueError):
    """Operands with incompatible or non-matrix shapes."""


class SingularMatrixError(RuntimeError):
    """SPD factorization failed even at the largest jitter rung."""


class CovarianceError(RuntimeError):
    """A covariance matrix violated symmetry, PSD, or finiteness."""


# Counters consumed by the hygiene tests; incremented by check_cov.
audit_stats = {"checked": 0, "violations": 0}
_audit_enabled = True


def reset_audit_stats() -> None:
    audit_stats["checked"] = 0
    audit_stats["violations"] = 0


def set_audit(enabled: bool) -> None:
    """Globally enable/disable the per-step covariance audits (default on)."""
    global _audit_enabled
    _audit_enabled = bool(enabled)


def require_square(a, name: str = "matrix") -> np.ndarray:
    a = np.asarray(a, dtype=float)
    if a.ndim != 2 or a.shape[0] != a.shape[1]:
        raise ShapeError(f"{name} must be square, got shape {a.shape}")
    return a


def symmetrize(m: np.ndarray) -> np.ndarray:
    """Symmetric part (m + m.T) / 2."""
    return 0.5 * (m + m.T)


_EYES: dict[int, np.ndarray] = {}


def _eye(n: int) -> np.ndarray:
    e = _EYES.get(n)
    if e is None:
        e = _EYES[n] = np.eye(n)
    return e


def _sym_ok(m: np.ndarray) -> bool:
    gap = np.abs(m - m.T).max() if m.size else 0.0
    return gap <= SYM_TOL * (1.0 + np.abs(m).max(initial=0.0))


def _psd_floor(m: np.ndarray) -> float:
    return PSD_TOL * (1.0 + np.trace(m) / m.shape[0])


def _psd_ok(m: np.ndarray) -> bool:
    tol = _psd_floor(m)
    # Cholesky of m + tol*I succeeding is a cheap sufficient certificate.
    try:
        cho_factor(m + tol * _eye(m.shape[0]), lower=True, check_finite=False)
        return True
    except np.linalg.LinAlgError:
        return float(np.linalg.eigvalsh(symmetrize(m))[0]) >= -tol


def check_cov(m, name: str = "covariance") -> np.ndarray:
    """Validate a covariance: finite, symmetric, PSD within jitter.

    Raises CovarianceError and counts the violation in ``audit_stats``.
    """
    audit_stats["checked"] += 1
    m = np.asarray(m, dtype=float)
    problem = None
    if m.ndim != 2 or m.shape[0] != m.shape[1]:
        problem = f"not square (shape {m.shape})"
    elif not np.isfinite(m).all():
        problem = "non-finite entries"
    elif not _sym_ok(m):
        problem = f"asymmetry {np.abs(m - m.T).max():.3e} above tolerance"
    elif not _psd_ok(m):
        lo = float(np.linalg.eigvalsh(symmetrize(m))[0])
        problem = f"minimum eigenvalue {lo:.3e} below tolerance"
    if problem is not None:
        audit_stats["violations"] += 1
        raise CovarianceError(f"{name}: {problem}")
    return m


def audit_cov(m, name: str = "covariance") -> None:
    """check_cov honoring the global audit switch."""
    if _audit_enabled:
        check_cov(m, name)


def audit_diag(v, name: str = "diagonal covariance") -> None:
    """Audit a diagonal covariance stored as its diagonal vector."""
    if not _audit_enabled:
        return
    audit_stats["checked"] += 1
    v = np.asarray(v, dtype=float)
    if not np.isfinite(v).all() or (v <= 0.0).any():
        audit_stats["violations"] += 1
        raise CovarianceError(f"{name}: entries must be finite and positive")


def spd_factor(a, name: str = "matrix"):
    """Cholesky factorization (scipy cho_factor) with the jitter ladder."""
    if not isinstance(a, np.ndarray) or a.ndim != 2 or a.shape[0] != a.shape[1]:
        a = require_square(a, name)
    try:
        return cho_factor(a, lower=True, check_finite=False)
    except np.linalg.LinAlgError:
        pass
    scale = 1.0 + abs(np.trace(a)) / a.shape[0]
    eye = _eye(a.shape[0])
    for jit in JITTER_LADDER[1:]:
        try:
            return cho_factor(a + (jit * scale) * eye, lower=True,
                              check_finite=False)
        except np.linalg.LinAlgError:
            continue
    raise SingularMatrixError(
        f"{name}: SPD factorization failed at maximum jitter {JITTER_LADDER[-1]:g}")


def solve_spd(a, b, name: str = "matrix") -> np.ndarray:
    """Solve a @ x = b for symmetric positive (semi)definite a."""
    a = require_square(a, name)
    b = np.asarray(b, dtype=float)
    if b.shape[0] != a.shape[0]:
        raise ShapeError(f"{name}: right-hand side rows {b.shape[0]} != {a.shape[0]}")
    return cho_solve(spd_factor(a, name), b, check_finite=False)


def chol_psd(a, name: str = "matrix") -> np.ndarray:
    """Lower-triangular Cholesky factor with the jitter ladder."""
    a = require_square(a, name)
    scale = 1.0 + abs(np.trace(a)) / a.shape[0]
    eye = np.eye(a.shape[0])
    for jit in JITTER_LADDER:
        try:
            return np.linalg.cholesky(a if jit == 0.0 else a + (jit * scale) * eye)
        except np.linalg.LinAlgError:
            continue
    raise SingularMatrixError(
        f"{name}: Cholesky failed at maximum jitter {JITTER_LADDER[-1]:g}")


def symmetrize_psd(m) -> np.ndarray:
    """Symmetric part of m, eigenvalue-clamped only if it fails the PSD tolerance."""
    s = symmetrize(require_square(m))
    if _psd_ok(s):
        return s
    w, v = np.linalg.eigh(s)
    return symmetrize((v * np.maximum(w, 0.0)) @ v.T)
