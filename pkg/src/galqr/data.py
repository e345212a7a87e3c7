"""Replicated functional regression dataset container."""
from __future__ import annotations

from dataclasses import dataclass, field

import numpy as np

__all__ = ["FunctionalDataset"]


@dataclass
class FunctionalDataset:
    """Scalar responses with replicated functional proxies on a common grid.

    W holds the proxy curves (n subjects x J replicates x T grid points),
    Z the error-free scalar covariates (n x p) and Y the responses. X_true
    is only populated by simulators, for scoring. ``mask`` optionally flags
    invalid grid cells (True = invalid), used by activity preprocessing.
    """

    grid: np.ndarray
    W: np.ndarray
    Z: np.ndarray
    Y: np.ndarray
    X_true: np.ndarray | None = None
    mask: np.ndarray | None = None
    subject_ids: list | None = None

    def __post_init__(self):
        self.grid = np.asarray(self.grid, dtype=float)
        self.W = np.asarray(self.W, dtype=float)
        self.Z = np.asarray(self.Z, dtype=float)
        self.Y = np.asarray(self.Y, dtype=float)
        if self.grid.ndim != 1 or (self.grid.size > 1 and np.any(np.diff(self.grid) <= 0)):
            raise ValueError("grid must be strictly increasing")
        if self.W.ndim != 3:
            raise ValueError("W must have shape (n, J, T)")
        n, J, T = self.W.shape
        if T != self.grid.size:
            raise ValueError("W grid axis does not match the grid length")
        if self.Z.ndim != 2 or self.Z.shape[0] != n:
            raise ValueError("Z must have shape (n, p)")
        if self.Y.shape != (n,):
            raise ValueError("Y must have shape (n,)")
        if self.X_true is not None:
            self.X_true = np.asarray(self.X_true, dtype=float)
            if self.X_true.shape != (n, T):
                raise ValueError("X_true must have shape (n, T)")
        if self.mask is not None:
            self.mask = np.asarray(self.mask, dtype=bool)
            if self.mask.shape != (n, J, T):
                raise ValueError("mask must have shape (n, J, T)")

    @property
    def n(self) -> int:
        return self.W.shape[0]

    @property
    def J(self) -> int:
        return self.W.shape[1]

    @property
    def T(self) -> int:
        return self.W.shape[2]

    @property
    def p(self) -> int:
        return self.Z.shape[1]

    def replicate_mean(self) -> np.ndarray:
        """Across-replicate average curve per subject, n x T."""
        return self.W.mean(axis=1)
