"""Class-conditional Gaussian mixture in latent space (identity covariances)."""
from __future__ import annotations

import logging
from dataclasses import dataclass

import numpy as np

from . import diffcore as dc
from .diffcore import Tensor

log = logging.getLogger(__name__)

LOG_2PI = float(np.log(2.0 * np.pi))
PRIOR_FLOOR = 1e-3


@dataclass(frozen=True)
class LatentPrior:
    means: np.ndarray   # (L, D)
    priors: np.ndarray  # (L,)

    def __post_init__(self):
        means = np.atleast_2d(np.asarray(self.means, dtype=np.float64))
        priors = np.asarray(self.priors, dtype=np.float64).ravel()
        if means.shape[0] != priors.size:
            raise ValueError(f"{means.shape[0]} means but {priors.size} priors")
        if np.any(priors < 0) or not np.isclose(priors.sum(), 1.0, atol=1e-12):
            raise ValueError("class priors must be non-negative and sum to 1")
        if not np.all(np.isfinite(means)):
            raise ValueError("non-finite latent means")
        object.__setattr__(self, "means", means)
        object.__setattr__(self, "priors", priors)

    @property
    def n_classes(self) -> int:
        return self.means.shape[0]

    @property
    def dim(self) -> int:
        return self.means.shape[1]

    @classmethod
    def standard(cls, dim: int) -> "LatentPrior":
        """A single standard normal component."""
        return cls(np.zeros((1, dim)), np.ones(1))

    @classmethod
    def random(cls, n_classes: int, dim: int, priors, rng: np.random.Generator) -> "LatentPrior":
        return cls(rng.standard_normal((n_classes, dim)), priors)


def empirical_priors(labels, n_classes: int, floor: float = PRIOR_FLOOR) -> np.ndarray:
    """Class frequencies among labelled rows (label >= 0), floored then renormalised."""
    labels = np.asarray(labels)
    labels = labels[labels >= 0]
    counts = np.bincount(labels, minlength=n_classes).astype(float)
    p = counts / max(counts.sum(), 1.0)
    p = np.maximum(p, floor)
    return p / p.sum()


def _sq_dist(z: Tensor, mu: np.ndarray) -> Tensor:
    return dc.sum(dc.square(dc.sub(z, mu.reshape(1, -1))), axis=1)


def log_density_class(z, k: int, prior: LatentPrior) -> Tensor:
    """log N(z | mu_k, I), one value per row."""
    z = z if isinstance(z, Tensor) else Tensor(z)
    if not 0 <= k < prior.n_classes:
        raise IndexError(f"class {k} out of range for {prior.n_classes} classes")
    d = z.shape[1]
    return dc.add(dc.scale(_sq_dist(z, prior.means[k]), -0.5), -0.5 * d * LOG_2PI)


def log_joint(z, prior: LatentPrior) -> Tensor:
    """(n, L) matrix of log pi_k + log N(z | mu_k, I)."""
    z = z if isinstance(z, Tensor) else Tensor(z)
    cols = [dc.add(log_density_class(z, k, prior), float(np.log(max(prior.priors[k], 1e-300))))
            for k in range(prior.n_classes)]
    return dc.concat_cols(*cols)


def log_marginal(z, prior: LatentPrior) -> Tensor:
    """log sum_k pi_k N(z | mu_k, I), one value per row."""
    return dc.logsumexp_rowwise(log_joint(z, prior))


def log_density_labeled(z, labels: np.ndarray, prior: LatentPrior) -> Tensor:
    """Per-row log N(z_i | mu_{y_i}, I) for integer labels."""
    z = z if isinstance(z, Tensor) else Tensor(z)
    labels = np.asarray(labels, dtype=np.intp)
    mu = prior.means[labels]
    d = z.shape[1]
    return dc.add(dc.scale(dc.sum(dc.square(dc.sub(z, mu)), axis=1), -0.5), -0.5 * d * LOG_2PI)


def posterior(z, prior: LatentPrior) -> np.ndarray:
    """Normalised class posteriors, (n, L)."""
    zv = z.value if isinstance(z, Tensor) else np.atleast_2d(np.asarray(z, dtype=np.float64))
    lj = log_joint(zv, prior).value
    lj = lj - lj.max(axis=1, keepdims=True)
    p = np.exp(lj)
    return p / p.sum(axis=1, keepdims=True)


def classify(z, prior: LatentPrior) -> tuple[np.ndarray, np.ndarray]:
    """Bayes rule: argmax_k pi_k N(z | mu_k, I); ties go to the lowest index."""
    post = posterior(z, prior)
    # np.argmax returns the first maximum
    return np.argmax(post, axis=1), post


def update_means(latents: np.ndarray, labels: np.ndarray, prior: LatentPrior) -> LatentPrior:
    """Set each class mean to the average latent of its labelled rows.

    Rows with label < 0 are ignored.  A class without labelled rows keeps its
    previous mean.
    """
    latents = np.asarray(latents, dtype=np.float64)
    labels = np.asarray(labels)
    means = prior.means.copy()
    for k in range(prior.n_classes):
        sel = labels == k
        if not np.any(sel):
            log.warning("class %d has no labelled rows; keeping its previous mean", k)
            continue
        means[k] = latents[sel].mean(axis=0)
    return LatentPrior(means, prior.priors)
