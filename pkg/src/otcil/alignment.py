"""Patch-attribute alignment: similarity, selection, entropic transport.

The local head scores a candidate class by aligning an image's most
discriminative patches with the class's sampled attribute embeddings:

    sims     cosine table between adapted patches and adapted attributes
    q        per-patch mean similarity (how attribute-like a patch is)
    top-k    keep the k highest-q patches (class-conditioned)
    cost     1 - sims over the kept rows
    plan     entropy-regularized optimal transport, uniform marginals
    sigma    plan-weighted similarity mass

Sinkhorn runs in the log domain with over-relaxed updates (omega = 1.5).
Over-relaxation shares the plain iteration's unique fixed point but cuts
the worst-case sweep count roughly threefold, which keeps hard random
cost matrices inside the default iteration budget.  Non-converged solves
return the last iterate, flagged and counted, never an exception.
"""

import warnings
from dataclasses import dataclass

import numpy as np

from .projectors import ProjectorStack, adapt_batch
from .rng import TAG_ATTR, generator

_OMEGA = 1.5  # over-relaxation factor; 1.0 recovers plain Sinkhorn

_warned_degrade = set()


class SinkhornError(ArithmeticError):
    """Raised when transport iterates stop being finite."""


@dataclass
class SimilarityMatrix:
    values: np.ndarray  # (M, N) float64 cosines


@dataclass
class SelectedPatches:
    indices: np.ndarray  # (k,) int, descending score, ties to smaller index
    scores: np.ndarray   # (k,) float64, the q scores of the kept patches


@dataclass
class TransportPlan:
    plan: np.ndarray          # (K, N) float64, entries >= 0
    row_marginal: np.ndarray  # (K,) target row sums (uniform 1/K)
    col_marginal: np.ndarray  # (N,) target col sums (uniform 1/N)
    iterations: int
    converged: bool


def _unit_rows(x: np.ndarray) -> tuple:
    x = np.asarray(x, dtype=np.float64)
    norms = np.linalg.norm(x, axis=-1)
    if (norms == 0.0).any():
        raise ValueError("zero-norm embedding")
    return x / norms[..., None], norms


def similarity_matrix(patch_feats: np.ndarray, attr_feats: np.ndarray) -> SimilarityMatrix:
    """Cosine table between adapted patch rows and adapted attribute rows."""
    p_unit, _ = _unit_rows(np.atleast_2d(patch_feats))
    a_unit, _ = _unit_rows(np.atleast_2d(attr_feats))
    return SimilarityMatrix(values=p_unit @ a_unit.T)


def discriminative_scores(sim: SimilarityMatrix) -> np.ndarray:
    """Per-patch mean similarity over the class's attributes."""
    return sim.values.mean(axis=1)


def select_patches(scores: np.ndarray, k: int) -> SelectedPatches:
    """Indices of the top-k scores, descending, ties to the smaller index.

    k larger than the patch count degrades to keeping everything, once
    per (k, M) pair with a warning.
    """
    scores = np.asarray(scores, dtype=np.float64)
    m = scores.shape[0]
    if k < 1:
        raise ValueError(f"k must be >= 1, got {k}")
    if k > m:
        key = (k, m)
        if key not in _warned_degrade:
            _warned_degrade.add(key)
            warnings.warn(f"top-k {k} exceeds patch count {m}; keeping all {m} patches")
        k = m
    order = np.argsort(-scores, kind="stable")[:k]
    return SelectedPatches(indices=order, scores=scores[order])


def transport_cost(sim_selected: np.ndarray) -> np.ndarray:
    """Cost = 1 - similarity over the selected rows (cosines -> [0, 2])."""
    return 1.0 - np.asarray(sim_selected, dtype=np.float64)


def _lse(x: np.ndarray, axis: int) -> np.ndarray:
    m = np.max(x, axis=axis, keepdims=True)
    return m + np.log(np.sum(np.exp(x - m), axis=axis, keepdims=True))


def sinkhorn_batched(costs: np.ndarray, lam: float, tol: float = 1e-6,
                     max_iter: int = 100) -> tuple:
    """Solve P independent (K, N) entropic transport problems at once.

    Uniform marginals 1/K and 1/N.  Each problem's potentials freeze as
    soon as its own L-inf marginal violation drops to tol, so a problem's
    trajectory is bit-identical whether solved alone or in a batch.

    Returns (plans (P,K,N), iterations (P,), converged (P,) bool).
    """
    costs = np.asarray(costs, dtype=np.float64)
    if costs.ndim != 3:
        raise ValueError(f"expected (P, K, N) costs, got shape {costs.shape}")
    if not np.isfinite(costs).all():
        raise SinkhornError("sinkhorn numerical failure: non-finite cost")
    if not (lam > 0):
        raise ValueError(f"entropic weight must be > 0, got {lam}")
    if max_iter < 1:
        raise ValueError(f"max_iter must be >= 1, got {max_iter}")
    n_prob, n_rows, n_cols = costs.shape
    log_a = -np.log(n_rows)
    log_b = -np.log(n_cols)
    f = np.zeros((n_prob, n_rows, 1))
    g = np.zeros((n_prob, 1, n_cols))
    iterations = np.full(n_prob, max_iter, dtype=np.int64)
    converged = np.zeros(n_prob, dtype=bool)
    active = np.ones(n_prob, dtype=bool)
    plans = np.exp((f + g - costs) / lam)
    for it in range(1, max_iter + 1):
        act = active[:, None, None]
        f_hat = lam * (log_a - _lse((g - costs) / lam, axis=2))
        f = np.where(act, (1.0 - _OMEGA) * f + _OMEGA * f_hat, f)
        g_hat = lam * (log_b - _lse((f - costs) / lam, axis=1))
        g = np.where(act, (1.0 - _OMEGA) * g + _OMEGA * g_hat, g)
        plans = np.exp((f + g - costs) / lam)
        if not np.isfinite(plans).all():
            raise SinkhornError("sinkhorn numerical failure: non-finite iterate")
        row_err = np.abs(plans.sum(axis=2) - 1.0 / n_rows).max(axis=1)
        col_err = np.abs(plans.sum(axis=1) - 1.0 / n_cols).max(axis=1)
        err = np.maximum(row_err, col_err)
        newly = active & (err <= tol)
        iterations[newly] = it
        converged |= newly
        active &= ~newly
        if not active.any():
            break
    return plans, iterations, converged


def sinkhorn(cost: np.ndarray, lam: float, tol: float = 1e-6,
             max_iter: int = 100) -> TransportPlan:
    """Entropic OT plan for one cost matrix (see sinkhorn_batched)."""
    cost = np.asarray(cost, dtype=np.float64)
    if cost.ndim != 2:
        raise ValueError(f"expected a 2-D cost matrix, got shape {cost.shape}")
    plans, iterations, converged = sinkhorn_batched(cost[None], lam, tol, max_iter)
    n_rows, n_cols = cost.shape
    return TransportPlan(
        plan=plans[0],
        row_marginal=np.full(n_rows, 1.0 / n_rows),
        col_marginal=np.full(n_cols, 1.0 / n_cols),
        iterations=int(iterations[0]),
        converged=bool(converged[0]),
    )


def local_score(plan: np.ndarray, sim_selected: np.ndarray) -> float:
    """Plan-weighted similarity mass: sum of plan * sims."""
    return float(np.sum(np.asarray(plan) * np.asarray(sim_selected)))


def sample_attribute_indices(class_id: int, available: int, n: int, seed: int) -> np.ndarray:
    """The class's fixed attribute subset, drawn once from its own stream.

    Seeded by (seed, class id) so the same class always binds the same
    subset, independent of session composition or iteration order.
    """
    if available < n:
        raise ValueError(
            f"class {class_id} has {available} attributes, fewer than sample size {n}")
    rng = generator(seed, TAG_ATTR, class_id)
    idx = rng.choice(available, size=n, replace=False)
    return np.sort(idx)


def batched_sigma(patches: np.ndarray, attrs: np.ndarray,
                  visual_stack: ProjectorStack, textual_stack: ProjectorStack,
                  top_k: int, lam: float, tol: float, max_iter: int,
                  upto: int | None = None, variant: str = "ot",
                  plan_mode: str = "sinkhorn", q_override: np.ndarray | None = None,
                  want_grads: bool = False) -> dict:
    """Local class scores for a batch of images sharing a patch count.

    patches: (B, M, d) raw patch rows; attrs: (C, N, d) raw sampled
    attribute rows.  Adapts both through the local stacks, then runs the
    selection/transport pipeline per (image, class) pair.

    variant "ot" scores with the transport plan; "naive" scores each kept
    patch by its best attribute (mean over k of max over n).  plan_mode
    "uniform" replaces the plan with 1/(k*n) (ablation).  q_override, if
    given, replaces the discriminative scores used for selection, shape
    (B, C, M).

    Returns a dict with sigma (B, C) plus, when want_grads, everything the
    analytic backward pass needs (unit rows, norms, sims, selections,
    plans) and the non-converged solve count.
    """
    batch, n_patch, d = patches.shape
    n_class, n_attr, _ = attrs.shape
    v_adapted = adapt_batch(visual_stack, patches.reshape(-1, d), upto=upto).reshape(batch, n_patch, d)
    a_adapted = adapt_batch(textual_stack, attrs.reshape(-1, d), upto=upto).reshape(n_class, n_attr, d)
    v_unit, v_norm = _unit_rows(v_adapted)
    a_unit, a_norm = _unit_rows(a_adapted)
    # sims[i, c, m, n] = cos(adapted patch m of image i, adapted attr n of class c)
    sims = np.einsum("imd,cnd->icmn", v_unit, a_unit)

    if q_override is not None:
        q = np.asarray(q_override, dtype=np.float64)
        if q.shape != (batch, n_class, n_patch):
            raise ValueError(f"q_override shape {q.shape} != {(batch, n_class, n_patch)}")
    else:
        q = sims.mean(axis=3)
    k = top_k
    if k > n_patch:
        key = (k, n_patch)
        if key not in _warned_degrade:
            _warned_degrade.add(key)
            warnings.warn(f"top-k {k} exceeds patch count {n_patch}; keeping all {n_patch} patches")
        k = n_patch
    if k < 1:
        raise ValueError(f"top_k must be >= 1, got {top_k}")
    sel = np.argsort(-q, axis=2, kind="stable")[:, :, :k]          # (B, C, k)
    sel_sims = np.take_along_axis(sims, sel[:, :, :, None], axis=2)  # (B, C, k, N)

    nonconverged = 0
    if variant == "naive":
        sigma = sel_sims.max(axis=3).mean(axis=2)
        plans = None
    elif variant == "ot":
        if plan_mode == "uniform":
            plans = np.full((batch, n_class, k, n_attr), 1.0 / (k * n_attr))
        elif plan_mode == "sinkhorn":
            flat_costs = (1.0 - sel_sims).reshape(batch * n_class, k, n_attr)
            flat_plans, _, conv = sinkhorn_batched(flat_costs, lam, tol, max_iter)
            nonconverged = int((~conv).sum())
            plans = flat_plans.reshape(batch, n_class, k, n_attr)
        else:
            raise ValueError(f"unknown plan_mode {plan_mode!r}")
        sigma = np.einsum("ickn,ickn->ic", plans, sel_sims)
    else:
        raise ValueError(f"unknown variant {variant!r}")

    out = {"sigma": sigma, "nonconverged": nonconverged}
    if want_grads:
        out.update(v_unit=v_unit, v_norm=v_norm, a_unit=a_unit, a_norm=a_norm,
                   sims=sims, sel=sel, sel_sims=sel_sims, plans=plans)
    return out


def local_logits(patches: np.ndarray, class_attrs: list,
                 visual_stack: ProjectorStack, textual_stack: ProjectorStack,
                 top_k: int, lam: float, tol: float = 1e-6, max_iter: int = 100,
                 upto: int | None = None, variant: str = "ot",
                 plan_mode: str = "sinkhorn") -> tuple:
    """Per-class local scores and their softmax for a single image.

    class_attrs is a list of (N, d) raw sampled-attribute matrices, one
    per candidate class (every class contributes the same N).  Returns
    (sigma, f_local), both (C,) float64; f_local is a softmax at unit
    temperature, so adding a candidate class never changes another
    class's sigma, only its share.
    """
    attr_stack = np.stack([np.asarray(a, dtype=np.float64) for a in class_attrs])
    res = batched_sigma(np.asarray(patches, dtype=np.float64)[None], attr_stack,
                        visual_stack, textual_stack, top_k, lam, tol, max_iter,
                        upto=upto, variant=variant, plan_mode=plan_mode)
    sigma = res["sigma"][0]
    return sigma, softmax(sigma)


def softmax(logits: np.ndarray, axis: int = -1) -> np.ndarray:
    logits = np.asarray(logits, dtype=np.float64)
    shifted = logits - logits.max(axis=axis, keepdims=True)
    e = np.exp(shifted)
    return e / e.sum(axis=axis, keepdims=True)
