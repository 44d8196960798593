"""Standard errors: delta method for (log-)hazards, simulation for CIFs.

The coefficient covariance is the inverse of the penalized information at
convergence.  SEs of the log-hazard at a point follow from the quadratic
form with the tensor basis row; hazard SEs are the delta-method transform
through exp.  CIF standard errors come from repeatedly drawing coefficient
vectors from their asymptotic normal distribution (independently per cause)
and recomputing the CIF for every draw.
"""

from __future__ import annotations

from dataclasses import dataclass, replace

import numpy as np
import scipy.linalg

from .basis import evaluate_basis
from .errors import Hazard2tsError
from .incidence import compute_surfaces
from .smooth2d import FittedHazard


@dataclass(frozen=True)
class MonteCarloConfig:
    """Number of coefficient draws and the RNG seed."""

    n_draws: int = 1000
    seed: int = 20120501

    def __post_init__(self):
        if self.n_draws < 2:
            raise ValueError(f"need at least 2 draws, got {self.n_draws}")


def coefficient_covariance(fit: FittedHazard) -> np.ndarray:
    """Covariance of the coefficient vector: (B'WB + P)^-1, symmetrized."""
    n = fit.n_coef
    Sigma = scipy.linalg.cho_solve(fit.factor, np.eye(n))
    return 0.5 * (Sigma + Sigma.T)


def _tensor_rows(fit: FittedHazard, u_points, s_points) -> np.ndarray:
    """Model-matrix rows for every grid point, shaped (n_u_pts, n_s_pts, n_coef).

    The coefficient index is column-major over (l, m), i.e. m * c_u + l,
    matching the vectorization used by the fitting kernels.
    """
    Bu = evaluate_basis(u_points, fit.kv_u).values
    Bs = evaluate_basis(s_points, fit.kv_s).values
    rows = Bs[None, :, :, None] * Bu[:, None, None, :]  # (nu, ns, c_s, c_u)
    return rows.reshape(len(Bu), len(Bs), -1)


def se_log_hazard(fit: FittedHazard, Sigma: np.ndarray, u_points, s_points) -> np.ndarray:
    """Delta-method SE of the log-hazard on the product grid of the points."""
    rows = _tensor_rows(fit, u_points, s_points)
    var = np.einsum("ijp,pq,ijq->ij", rows, Sigma, rows)
    return np.sqrt(np.maximum(var, 0.0))


def se_log_hazard_points(fit: FittedHazard, Sigma: np.ndarray, u_arr, s_arr) -> np.ndarray:
    """Log-hazard SE at paired points (u_i, s_i) instead of a product grid."""
    Bu = evaluate_basis(u_arr, fit.kv_u).values
    Bs = evaluate_basis(s_arr, fit.kv_s).values
    rows = (Bs[:, :, None] * Bu[:, None, :]).reshape(len(Bu), -1)
    var = np.einsum("ip,pq,iq->i", rows, Sigma, rows)
    return np.sqrt(np.maximum(var, 0.0))


def se_hazard(fit: FittedHazard, Sigma: np.ndarray, u_points, s_points) -> np.ndarray:
    """SE of the hazard itself: hazard times the log-hazard SE, elementwise."""
    Bu = evaluate_basis(u_points, fit.kv_u).values
    Bs = evaluate_basis(s_points, fit.kv_s).values
    lam = np.exp(Bu @ fit.A @ Bs.T)
    return lam * se_log_hazard(fit, Sigma, u_points, s_points)


def sample_coefficients(mean: np.ndarray, Sigma: np.ndarray, n_draws: int,
                        rng: np.random.Generator) -> np.ndarray:
    """Draw from N(mean, Sigma) via Cholesky, with one jitter retry.

    Returns an (n_draws, len(mean)) array; raises if Sigma is not positive
    semidefinite even after adding 1e-10 * trace jitter.
    """
    Sigma = np.asarray(Sigma, dtype=float)
    n = len(mean)
    if np.max(np.abs(Sigma)) == 0.0:
        return np.tile(mean, (n_draws, 1))
    try:
        L = np.linalg.cholesky(Sigma)
    except np.linalg.LinAlgError:
        jitter = 1e-10 * np.trace(Sigma) / n
        try:
            L = np.linalg.cholesky(Sigma + jitter * np.eye(n))
        except np.linalg.LinAlgError:
            raise Hazard2tsError("coefficient covariance not positive semidefinite "
                                 "after jitter") from None
    z = rng.standard_normal((n_draws, n))
    return mean[None, :] + z @ L.T


def cif_standard_errors(
    fits: dict,
    Sigmas: dict,
    cause: int,
    u_points,
    s_points,
    mc: MonteCarloConfig = MonteCarloConfig(),
    delta: float = None,
) -> np.ndarray:
    """Monte-Carlo SE of one cause's CIF on the product grid of the points.

    Coefficient draws are independent across causes (the causes are fitted
    separately; only the exposures are shared).  The empirical standard
    deviation uses divisor n_draws - 1 and is bitwise reproducible for a
    given seed.
    """
    causes = sorted(fits)
    rng = np.random.default_rng(mc.seed)
    draws = {
        ell: sample_coefficients(fits[ell].coef, Sigmas[ell], mc.n_draws, rng)
        for ell in causes
    }

    mean = None
    m2 = None
    for k in range(mc.n_draws):
        perturbed = {
            ell: replace(fits[ell], A=draws[ell][k].reshape(fits[ell].A.shape, order="F"))
            for ell in causes
        }
        surf = compute_surfaces(perturbed, u_points, s_points, delta=delta,
                                extrapolation=False)
        value = surf.cif[cause]
        if mean is None:
            mean = np.zeros_like(value)
            m2 = np.zeros_like(value)
        d1 = value - mean
        mean += d1 / (k + 1)
        m2 += d1 * (value - mean)
    return np.sqrt(m2 / (mc.n_draws - 1))
