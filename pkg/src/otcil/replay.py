"""Gaussian pseudo-feature replay.

When a class's session ends, the engine records the mean and population
covariance of its frozen [CLS] features.  Later sessions never see the
class's images again; instead, each training step draws a batch of
pseudo-features from N(mean, cov + shrinkage) and pushes them through the
current global stacks, keeping old classes represented in the global
cross-entropy.  Statistics are recorded once and never updated.
"""

from dataclasses import dataclass

import numpy as np


@dataclass
class ClassStatistics:
    class_id: int
    mean: np.ndarray        # (d,)
    covariance: np.ndarray  # (d, d) population (divide by n)
    count: int


def record_statistics(class_id: int, features: np.ndarray) -> ClassStatistics:
    """Mean and population covariance of a class's frozen [CLS] features."""
    feats = np.asarray(features, dtype=np.float64)
    if feats.ndim != 2 or feats.shape[0] < 1:
        raise ValueError("record_statistics needs a non-empty (n, d) matrix")
    if not np.isfinite(feats).all():
        raise ValueError("non-finite value in class features")
    n = feats.shape[0]
    mean = feats.mean(axis=0)
    centered = feats - mean
    cov = centered.T @ centered / n
    return ClassStatistics(class_id=int(class_id), mean=mean, covariance=cov, count=n)


def regularized_covariance(stats: ClassStatistics, epsilon: float,
                           diagonal_only: bool = False) -> np.ndarray:
    """cov + epsilon * (trace/d) * I, with an absolute floor on the jitter.

    The floor (1e-12) keeps the Cholesky factorization defined even for a
    zero covariance or epsilon = 0, in which case samples collapse to the
    mean up to negligible jitter.
    """
    if epsilon < 0:
        raise ValueError(f"epsilon must be >= 0, got {epsilon}")
    cov = np.asarray(stats.covariance, dtype=np.float64)
    d = cov.shape[0]
    if diagonal_only:
        cov = np.diag(np.diag(cov))
    jitter = max(epsilon * float(np.trace(cov)) / d, 1e-12)
    return cov + jitter * np.eye(d)


def sample_pseudo_features(stats: ClassStatistics, count: int, epsilon: float,
                           rng: np.random.Generator, diagonal_only: bool = False) -> np.ndarray:
    """Draw pseudo-features from the class Gaussian via Cholesky.

    rng is a seeded generator (the trainer derives one per step); sampling
    is count rows of standard normals mapped through the factor, so equal
    (stats, count, rng state) reproduce bit-identical output.
    """
    if count < 0:
        raise ValueError(f"count must be >= 0, got {count}")
    reg = regularized_covariance(stats, epsilon, diagonal_only=diagonal_only)
    try:
        factor = np.linalg.cholesky(reg)
    except np.linalg.LinAlgError as exc:
        raise ValueError(f"degenerate covariance for class {stats.class_id}") from exc
    z = rng.standard_normal((count, reg.shape[0]))
    return np.asarray(stats.mean, dtype=np.float64)[None, :] + z @ factor.T


def quantize_statistics(stats: ClassStatistics) -> ClassStatistics:
    """Round to the float32 grid (the at-rest precision of checkpoints)."""
    return ClassStatistics(
        class_id=stats.class_id,
        mean=stats.mean.astype(np.float32).astype(np.float64),
        covariance=stats.covariance.astype(np.float32).astype(np.float64),
        count=stats.count,
    )
