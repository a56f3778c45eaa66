"""Session training: fused global/local loss with closed-form gradients.

The global head is cross-entropy over cosine logits between the adapted
[CLS] feature and every seen class's adapted [EOS] embedding.  The local
head is cross-entropy over transport-aligned patch-attribute scores.
Transport plans and patch selections are treated as constants of the
forward pass (the envelope view), so gradients flow only through the
cosine similarities; every gradient below is exact for that fixed-plan
objective, which is what the finite-difference checks verify.

Only the current session's four projectors receive updates.  SGD with a
cosine-annealed learning rate; one Gaussian pseudo-batch per step keeps
old classes alive in the global head from session 2 on.
"""

import math
from dataclasses import dataclass, field

import numpy as np

from . import semantics
from .alignment import batched_sigma, sample_attribute_indices, softmax
from .config import TrainerConfig
from .corpus import EmbeddingBundle
from .projectors import (TEXTUAL_GLOBAL, TEXTUAL_LOCAL, VISUAL_GLOBAL, VISUAL_LOCAL,
                         adapt_batch, apply_sgd_step, begin_task)
from .replay import (quantize_statistics, record_statistics, regularized_covariance,
                     sample_pseudo_features)
from .rng import TAG_PSEUDO, TAG_SHUFFLE, generator
from .state import EngineState


class NumericalError(ArithmeticError):
    """Training produced a non-finite loss or gradient."""


@dataclass
class TrainingLog:
    lines: list = field(default_factory=list)   # one dict per step (JSONL schema)
    pseudo_batches: int = 0
    nonconverged: int = 0
    sample_sets: list = field(default_factory=list)


def cosine_lr(step: int, total_steps: int, lr0: float) -> float:
    """Cosine annealing from lr0 (first step) to 0 (last step)."""
    if total_steps <= 1:
        return lr0
    return lr0 * 0.5 * (1.0 + math.cos(math.pi * step / (total_steps - 1)))


def _unit_rows(x):
    norms = np.linalg.norm(x, axis=-1)
    if (norms == 0.0).any():
        raise ValueError("zero-norm embedding")
    return x / norms[..., None], norms


def global_loss(feats_raw: np.ndarray, labels: np.ndarray, eos_raw: np.ndarray,
                visual_stack, textual_stack, temperature: float,
                want_grads: bool = True) -> tuple:
    """Mean CE over cosine logits; analytic grads for the current projectors.

    feats_raw may mix real and pseudo features: both adapt through the
    current visual global stack identically.  Returns (loss, grads, probs)
    where grads maps branch name to (dW, db) for the unfrozen projector.
    """
    x = np.asarray(feats_raw, dtype=np.float64)
    y = np.asarray(labels)
    v = adapt_batch(visual_stack, x)
    t = adapt_batch(textual_stack, np.asarray(eos_raw, dtype=np.float64))
    v_unit, v_norm = _unit_rows(v)
    t_unit, t_norm = _unit_rows(t)
    logits = (v_unit @ t_unit.T) / temperature
    shifted = logits - logits.max(axis=1, keepdims=True)
    log_z = np.log(np.exp(shifted).sum(axis=1)) + logits.max(axis=1)
    loss = float(np.mean(log_z - logits[np.arange(len(y)), y]))
    if not want_grads:
        return loss, {}, softmax(logits, axis=1)
    probs = softmax(logits, axis=1)
    dlogits = probs.copy()
    dlogits[np.arange(len(y)), y] -= 1.0
    dlogits /= len(y)
    dv_unit = (dlogits @ t_unit) / temperature
    dt_unit = (dlogits.T @ v_unit) / temperature
    dv = (dv_unit - (dv_unit * v_unit).sum(axis=1, keepdims=True) * v_unit) / v_norm[:, None]
    dt = (dt_unit - (dt_unit * t_unit).sum(axis=1, keepdims=True) * t_unit) / t_norm[:, None]
    grads = {
        VISUAL_GLOBAL: (dv.T @ x, dv.sum(axis=0)),
        TEXTUAL_GLOBAL: (dt.T @ np.asarray(eos_raw, dtype=np.float64), dt.sum(axis=0)),
    }
    return loss, grads, probs


def local_loss(patch_groups: list, labels: np.ndarray, attrs_raw: np.ndarray,
               visual_stack, textual_stack, cfg: TrainerConfig,
               want_grads: bool = True) -> tuple:
    """Mean CE over transport-aligned local scores, plan and selection frozen.

    patch_groups is a list of (row_indices, patches (g, M, d)) sharing a
    patch count within each group; groups are processed in ascending M so
    gradient accumulation order is fixed.  attrs_raw is (C, N, d), the raw
    sampled attribute rows of every candidate class.
    """
    batch = len(labels)
    n_class = attrs_raw.shape[0]
    sigma = np.zeros((batch, n_class))
    group_aux = []
    nonconverged = 0
    for rows, patches in patch_groups:
        res = batched_sigma(patches, attrs_raw, visual_stack, textual_stack,
                            cfg.top_k, cfg.sinkhorn_reg, cfg.sinkhorn_tol,
                            cfg.sinkhorn_max_iter, want_grads=want_grads)
        sigma[rows] = res["sigma"]
        nonconverged += res["nonconverged"]
        if want_grads:
            group_aux.append((rows, patches, res))
    shifted = sigma - sigma.max(axis=1, keepdims=True)
    log_z = np.log(np.exp(shifted).sum(axis=1)) + sigma.max(axis=1)
    loss = float(np.mean(log_z - sigma[np.arange(batch), labels]))
    if not want_grads:
        return loss, {}, nonconverged
    probs = softmax(sigma, axis=1)
    gsig = probs.copy()
    gsig[np.arange(batch), labels] -= 1.0
    gsig /= batch

    d = attrs_raw.shape[2]
    gw_v = np.zeros((d, d)); gb_v = np.zeros(d)
    da_unit = None
    a_unit = a_norm = None
    for rows, patches, res in group_aux:
        a_unit, a_norm = res["a_unit"], res["a_norm"]
        g = gsig[rows]                                   # (g, C)
        h = g[:, :, None, None] * res["plans"]           # (g, C, k, N)
        g_full = np.zeros_like(res["sims"])              # (g, C, M, N)
        idx = np.broadcast_to(res["sel"][:, :, :, None], h.shape)
        np.put_along_axis(g_full, idx, h, axis=2)
        dv_unit = np.einsum("icmn,cnd->imd", g_full, a_unit)
        contrib = np.einsum("icmn,imd->cnd", g_full, res["v_unit"])
        da_unit = contrib if da_unit is None else da_unit + contrib
        v_unit, v_norm = res["v_unit"], res["v_norm"]
        dv = (dv_unit - (dv_unit * v_unit).sum(axis=2, keepdims=True) * v_unit) / v_norm[..., None]
        gw_v += np.einsum("imd,ime->de", dv, patches)
        gb_v += dv.sum(axis=(0, 1))
    da = (da_unit - (da_unit * a_unit).sum(axis=2, keepdims=True) * a_unit) / a_norm[..., None]
    gw_t = np.einsum("cnd,cne->de", da, attrs_raw)
    gb_t = da.sum(axis=(0, 1))
    grads = {VISUAL_LOCAL: (gw_v, gb_v), TEXTUAL_LOCAL: (gw_t, gb_t)}
    return loss, grads, nonconverged


def group_by_patch_count(patch_list: list, rows) -> list:
    """Group a batch's rows by patch count M, ascending.

    Returns (batch positions, stacked (g, M, d) patches) per group, so a
    mixed-M batch runs the vectorized pipeline once per distinct M.
    """
    buckets = {}
    for pos, r in enumerate(rows):
        m = patch_list[int(r)].shape[0]
        buckets.setdefault(m, []).append((pos, int(r)))
    out = []
    for m in sorted(buckets):
        positions = np.asarray([p for p, _ in buckets[m]], dtype=np.int64)
        stacked = np.stack([patch_list[r] for _, r in buckets[m]]).astype(np.float64)
        out.append((positions, stacked))
    return out


def train_task(state: EngineState, bundle: EmbeddingBundle, session_classes: list,
               train_samples: list, n_diverse: int = semantics.DEFAULT_DIVERSE) -> TrainingLog:
    """Run one incremental session end to end (mutates state).

    train_samples are the session classes' training split.  Freezes all
    prior projectors, appends and trains the new ones, then records
    replay statistics for the new classes from their frozen features.
    """
    cfg = state.config
    session_index = state.num_sessions + 1
    seen_before = set(state.class_order())
    if not session_classes:
        raise ValueError("empty session")
    if len(set(session_classes)) != len(session_classes):
        raise ValueError("duplicate class in session")
    for cid in session_classes:
        if cid in seen_before:
            raise ValueError(f"class {cid} already trained")
    by_class = {}
    for s in train_samples:
        by_class.setdefault(s.label, []).append(s)
    for cid in session_classes:
        if not by_class.get(cid):
            raise ValueError(f"class {cid} has no training samples")
    class_table = bundle.class_by_id()

    log = TrainingLog()
    for stack in state.stacks.values():
        begin_task(stack, state.dim)
    session_view = EmbeddingBundle(dimension=state.dim, samples=train_samples,
                                   classes=bundle.classes)
    log.sample_sets = semantics.build_visual_sample_sets(session_view, session_classes,
                                                         n_diverse=n_diverse)
    for cid in session_classes:
        n_avail = class_table[cid].attribute_embeddings.shape[0]
        state.attr_indices[cid] = sample_attribute_indices(
            cid, n_avail, cfg.attr_sample_size, cfg.seed)
    state.sessions.append(list(session_classes))

    dense = state.dense_index()
    seen = state.class_order()
    eos_raw = np.stack([np.asarray(class_table[c].eos_embedding, dtype=np.float64)
                        for c in seen])
    attrs_raw = np.stack([
        np.asarray(class_table[c].attribute_embeddings, dtype=np.float64)[state.attr_indices[c]]
        for c in seen])

    samples = [s for cid in session_classes for s in by_class[cid]]
    feats = np.stack([np.asarray(s.cls, dtype=np.float64) for s in samples])
    labels = np.asarray([dense[s.label] for s in samples], dtype=np.int64)
    patch_list = [np.asarray(s.patches, dtype=np.float64) for s in samples]
    n = len(samples)

    old_dense = np.asarray([dense[c] for c in seen
                            if c not in set(session_classes)], dtype=np.int64)
    use_replay = cfg.replay_enabled and session_index >= 2 and old_dense.size > 0
    if use_replay:
        old_ids = [seen[i] for i in old_dense]
        chol = []
        means = []
        for cid in old_ids:
            st = state.class_stats[cid]
            reg = regularized_covariance(st, cfg.cov_shrinkage, diagonal_only=cfg.diagonal_cov)
            chol.append(np.linalg.cholesky(reg))
            means.append(np.asarray(st.mean, dtype=np.float64))
        chol = np.stack(chol)
        means = np.stack(means)

    steps_per_epoch = math.ceil(n / cfg.batch_size)
    total_steps = cfg.epochs * steps_per_epoch
    gstep = 0
    for epoch in range(cfg.epochs):
        order = generator(cfg.seed, TAG_SHUFFLE, session_index, epoch).permutation(n)
        for step in range(steps_per_epoch):
            rows = order[step * cfg.batch_size:(step + 1) * cfg.batch_size]
            lr = cosine_lr(gstep, total_steps, cfg.learning_rate)
            x_b = feats[rows]
            y_b = labels[rows]
            if use_replay:
                rng_p = generator(cfg.seed, TAG_PSEUDO, session_index, epoch, step)
                pick = rng_p.integers(0, old_dense.size, size=len(rows))
                z = rng_p.standard_normal((len(rows), state.dim))
                pseudo = means[pick] + np.einsum("bd,bed->be", z, chol[pick])
                x_g = np.concatenate([x_b, pseudo])
                y_g = np.concatenate([y_b, old_dense[pick]])
                log.pseudo_batches += 1
            else:
                x_g, y_g = x_b, y_b
            l_g, grads_g, _ = global_loss(x_g, y_g, eos_raw,
                                          state.stacks[VISUAL_GLOBAL],
                                          state.stacks[TEXTUAL_GLOBAL],
                                          cfg.temperature)
            if cfg.local_weight != 0.0:
                groups = group_by_patch_count(patch_list, rows)
                l_l, grads_l, nonconv = local_loss(groups, y_b, attrs_raw,
                                                   state.stacks[VISUAL_LOCAL],
                                                   state.stacks[TEXTUAL_LOCAL], cfg)
                log.nonconverged += nonconv
            else:
                l_l, grads_l, nonconv = 0.0, {}, 0
            total = l_g + cfg.local_weight * l_l
            if not math.isfinite(total):
                raise NumericalError(f"non-finite loss at session {session_index} "
                                     f"epoch {epoch} step {step}")
            for branch, (gw, gb) in grads_g.items():
                apply_sgd_step(state.stacks[branch].current, gw, gb, lr)
            for branch, (gw, gb) in grads_l.items():
                apply_sgd_step(state.stacks[branch].current, gw, gb,
                               lr * cfg.local_weight)
            log.lines.append({
                "session": session_index, "epoch": epoch, "step": step,
                "lr": lr, "L_g": l_g, "L_l": l_l, "L": total,
                "sinkhorn_nonconverged_count": nonconv,
            })
            gstep += 1

    for cid in session_classes:
        cls_feats = np.stack([np.asarray(s.cls, dtype=np.float64) for s in by_class[cid]])
        state.class_stats[cid] = quantize_statistics(record_statistics(cid, cls_feats))
    return log
