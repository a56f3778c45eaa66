"""Independent reference implementations used by the test suite.

Everything here is written straight from the defining formulas, favoring
clarity over speed: explicit loops, scipy helpers, no code shared with
the package under test.  Expected values in tests come from these.
"""

import numpy as np
from scipy.special import logsumexp


def sinkhorn_oracle(cost, lam, tol=1e-13, max_iter=1_000_000):
    """Plain alternating log-domain Sinkhorn with uniform marginals.

    Maintains dual potentials alpha, beta over log-kernel logK = -C/lam;
    no over-relaxation, no batching.  Returns the transport plan.
    """
    cost = np.asarray(cost, dtype=np.float64)
    n_rows, n_cols = cost.shape
    log_a = np.full(n_rows, -np.log(n_rows))
    log_b = np.full(n_cols, -np.log(n_cols))
    log_kernel = -cost / lam
    alpha = np.zeros(n_rows)
    beta = np.zeros(n_cols)
    for _ in range(max_iter):
        alpha = log_a - logsumexp(log_kernel + beta[None, :], axis=1)
        beta = log_b - logsumexp(log_kernel + alpha[:, None], axis=0)
        plan = np.exp(alpha[:, None] + beta[None, :] + log_kernel)
        row_err = np.max(np.abs(plan.sum(axis=1) - 1.0 / n_rows))
        col_err = np.max(np.abs(plan.sum(axis=0) - 1.0 / n_cols))
        if max(row_err, col_err) <= tol:
            break
    return plan


def cosine_oracle(a, b):
    a = np.asarray(a, dtype=np.float64)
    b = np.asarray(b, dtype=np.float64)
    return float(np.dot(a, b) / (np.linalg.norm(a) * np.linalg.norm(b)))


def similarity_oracle(patches, attrs):
    """Entry-wise cosine table via the scalar oracle."""
    out = np.zeros((len(patches), len(attrs)))
    for m, p in enumerate(patches):
        for n, a in enumerate(attrs):
            out[m, n] = cosine_oracle(p, a)
    return out


def topk_oracle(scores, k):
    """Indices of the k largest scores, descending, ties to smaller index."""
    order = sorted(range(len(scores)), key=lambda i: (-scores[i], i))
    return order[:min(k, len(scores))]


def mean_cov_oracle(features):
    """Loop-summed mean and population covariance (divide by n)."""
    feats = np.asarray(features, dtype=np.float64)
    n, d = feats.shape
    mean = np.zeros(d)
    for row in feats:
        mean += row
    mean /= n
    cov = np.zeros((d, d))
    for row in feats:
        delta = row - mean
        cov += np.outer(delta, delta)
    cov /= n
    return mean, cov


def softmax_oracle(logits):
    logits = np.asarray(logits, dtype=np.float64)
    shifted = logits - logits.max()
    e = np.exp(shifted)
    return e / e.sum()


def cross_entropy_oracle(probs, label):
    return -float(np.log(probs[label]))


def forgetting_oracle(matrix):
    """Mean over earlier sessions of (best historical accuracy - final)."""
    n_sessions = len(matrix)
    if n_sessions < 2:
        return None
    total = 0.0
    for b in range(n_sessions - 1):
        best = max(matrix[step][b] for step in range(b, n_sessions - 1))
        total += best - matrix[n_sessions - 1][b]
    return total / (n_sessions - 1)


def local_sigma_oracle(patches, attrs, top_k, lam, sinkhorn_tol=1e-13):
    """Straight-line chain: cosine table -> row means -> top-k -> cost ->
    oracle transport plan -> plan-weighted similarity sum."""
    sims = similarity_oracle(patches, attrs)
    q = [float(np.mean(sims[m])) for m in range(sims.shape[0])]
    keep = topk_oracle(q, top_k)
    sel = sims[keep, :]
    plan = sinkhorn_oracle(1.0 - sel, lam, tol=sinkhorn_tol)
    return float(np.sum(plan * sel)), keep, plan
