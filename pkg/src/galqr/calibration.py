"""Measurement-error handling on basis scores: naive averaging and fast
regression calibration (method-of-moments BLUP).

The calibration operates on projected basis scores rather than pointwise in
time: replicate curves are projected first, the between/within moment
decomposition is estimated on the score vectors, and each subject's latent
score is predicted by the best linear predictor given the replicate mean.
Calibration uncertainty is not propagated into second-stage posteriors
(known limitation of the fast two-stage route).
"""
from __future__ import annotations

from dataclasses import dataclass

import numpy as np

from .basis import BasisSystem, project_curve
from .data import FunctionalDataset

__all__ = ["ScoreDataset", "naive_scores", "moment_estimates", "rc_calibrate",
           "blup_scores"]


@dataclass
class ScoreDataset:
    """Projected and calibrated score summaries of a replicated dataset."""

    Wbar_scores: np.ndarray       # n x K_n, projected replicate means
    Xhat_scores: np.ndarray       # n x K_n, calibrated scores
    mu_x_hat: np.ndarray          # K_n
    Sigma_x_hat: np.ndarray       # K_n x K_n, eigenvalue-clipped PSD
    Sigma_u_hat: np.ndarray       # K_n x K_n


def replicate_scores(data: FunctionalDataset, basis: BasisSystem) -> np.ndarray:
    """Project every replicate curve, returning n x J x K_n."""
    return project_curve(data.W, basis)


def naive_scores(data: FunctionalDataset, basis: BasisSystem) -> np.ndarray:
    """Scores of the replicate-average curve, treating it as exact."""
    return project_curve(data.replicate_mean(), basis)


def moment_estimates(data: FunctionalDataset, basis: BasisSystem):
    """Method-of-moments estimates (mu_x, Sigma_x, Sigma_u) on basis scores.

    Sigma_u is the within-subject replicate covariance; Sigma_x is the
    between-subject covariance of replicate means minus Sigma_u / J, with
    negative eigenvalues clipped at zero to restore positive
    semidefiniteness.
    """
    if data.J < 2:
        raise ValueError("moment estimation requires J >= 2 replicates")
    w = replicate_scores(data, basis)                    # n x J x K
    wbar = w.mean(axis=1)                                # n x K
    mu_x_hat = wbar.mean(axis=0)
    dev = w - wbar[:, None, :]
    n, J, K = w.shape
    Sigma_u_hat = np.einsum("ijk,ijl->kl", dev, dev) / (n * (J - 1))
    s_between = np.cov(wbar, rowvar=False, ddof=1).reshape(K, K)
    raw = s_between - Sigma_u_hat / J
    evals, evecs = np.linalg.eigh((raw + raw.T) / 2.0)
    Sigma_x_hat = (evecs * np.clip(evals, 0.0, None)) @ evecs.T
    return mu_x_hat, Sigma_x_hat, Sigma_u_hat


def blup_scores(wbar, mu_x, Sigma_x, Sigma_u, J: int, jitter: float = 1e-10):
    """Best linear predictor mu + Sigma_x (Sigma_x + Sigma_u/J)^-1 (wbar - mu).

    Solves the symmetric calibration system, retrying once with a small
    ridge if it is numerically singular.
    """
    wbar = np.atleast_2d(np.asarray(wbar, dtype=float))
    cal = Sigma_x + Sigma_u / J
    dev = (wbar - mu_x).T
    try:
        sol = np.linalg.solve(cal, dev)
    except np.linalg.LinAlgError:
        try:
            sol = np.linalg.solve(cal + jitter * np.eye(cal.shape[0]), dev)
        except np.linalg.LinAlgError:
            cond = np.linalg.cond(cal)
            raise np.linalg.LinAlgError(
                f"calibration matrix singular even with jitter "
                f"(condition number {cond:.3e})"
            )
    return mu_x + (Sigma_x @ sol).T


def rc_calibrate(data: FunctionalDataset, basis: BasisSystem) -> ScoreDataset:
    """Fast regression calibration of latent scores from replicate means."""
    mu_x_hat, Sigma_x_hat, Sigma_u_hat = moment_estimates(data, basis)
    wbar = replicate_scores(data, basis).mean(axis=1)
    xhat = blup_scores(wbar, mu_x_hat, Sigma_x_hat, Sigma_u_hat, data.J)
    return ScoreDataset(
        Wbar_scores=wbar,
        Xhat_scores=xhat,
        mu_x_hat=mu_x_hat,
        Sigma_x_hat=Sigma_x_hat,
        Sigma_u_hat=Sigma_u_hat,
    )
