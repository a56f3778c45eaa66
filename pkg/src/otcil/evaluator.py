"""Evaluation: prediction modes, incremental accuracy, forgetting, reports.

Prediction aggregates the two heads on the cosine scale: adapted global
cosines plus beta times the local transport scores, which are themselves
plan-weighted cosines.  The softmax temperature shapes training losses
only; dividing by it at inference would leave the local head numerically
inert (a 0.2-weighted score bounded by 1 cannot move logits that sit
hundreds apart).  Ablation modes swap out pieces of the local pipeline:

    full           selection + transport alignment (the whole method)
    zero_shot      raw frozen cosine between [CLS] and [EOS]; no training
    global_only    global head alone (beta = 0)
    no_ot          uniform transport plan instead of the Sinkhorn solve
    random_select  seeded random patch selection scores
    prompt_select  patches ranked by similarity to the class [EOS]
    naive_match    each kept patch scored by its best attribute

Because frozen projectors never change, truncating the stacks to their
first l entries reproduces the model exactly as it stood after session l,
so a final checkpoint yields the full lower-triangular accuracy matrix.
"""

import csv
import io
import json
import os
from dataclasses import dataclass, field

import numpy as np

from .alignment import batched_sigma
from .corpus import EmbeddingBundle, _atomic_write
from .projectors import (TEXTUAL_GLOBAL, TEXTUAL_LOCAL, VISUAL_GLOBAL, VISUAL_LOCAL,
                         adapt_batch)
from .rng import TAG_RANDOM_SELECT, TAG_SPLIT, generator, stable_text_key
from .state import EngineState
from .trainer import group_by_patch_count

LOCAL_MODES = ("full", "no_ot", "random_select", "prompt_select", "naive_match")


@dataclass
class AccuracyMatrix:
    """rows[l-1][b-1] = accuracy (percent) on session-b classes after session l."""
    rows: list = field(default_factory=list)

    @property
    def num_sessions(self) -> int:
        return len(self.rows)


@dataclass
class SessionReport:
    mode: str
    beta: float
    session_accuracies: list   # A_l, percent, over all classes seen at stage l
    matrix: AccuracyMatrix
    num_classes_per_session: list
    average_accuracy: float
    last_accuracy: float
    forgetting: float | None


@dataclass
class PredictResult:
    class_id: int
    dense_index: int
    f_global: np.ndarray
    f_local: np.ndarray | None
    fused: np.ndarray


def forgetting_measure(matrix: AccuracyMatrix) -> float:
    """Mean over earlier sessions of (peak past accuracy - final accuracy)."""
    rows = matrix.rows
    n_sessions = len(rows)
    if n_sessions < 2:
        raise ValueError("undefined for single session")
    final = rows[-1]
    total = 0.0
    for b in range(1, n_sessions):
        peak = max(rows[step - 1][b - 1] for step in range(b, n_sessions))
        total += peak - final[b - 1]
    return total / (n_sessions - 1)


def train_test_split(bundle: EmbeddingBundle, seed: int) -> tuple:
    """Sample indices for training and evaluation.

    Bundles may carry explicit split markers; otherwise each class gets a
    seeded 80/20 split (at least one test sample when the class has two
    or more; singletons go to training).
    """
    if bundle.splits is not None:
        train_rows = [i for i, v in enumerate(bundle.splits) if v == "train"]
        test_rows = [i for i, v in enumerate(bundle.splits) if v == "test"]
        return train_rows, test_rows
    by_class = {}
    for i, s in enumerate(bundle.samples):
        by_class.setdefault(s.label, []).append(i)
    train_rows, test_rows = [], []
    for cid in sorted(by_class):
        rows = by_class[cid]
        n = len(rows)
        if n == 1:
            train_rows.extend(rows)
            continue
        n_test = max(1, int(round(0.2 * n)))
        perm = generator(seed, TAG_SPLIT, cid).permutation(n)
        picked = set(int(perm[j]) for j in range(n_test))
        for j, row in enumerate(rows):
            (test_rows if j in picked else train_rows).append(row)
    return sorted(train_rows), sorted(test_rows)


def _local_scores(state: EngineState, class_table: dict, samples: list, seen: list,
                  mode: str, stage: int) -> np.ndarray:
    cfg = state.config
    attrs_raw = np.stack([
        np.asarray(class_table[c].attribute_embeddings, dtype=np.float64)[state.attr_indices[c]]
        for c in seen])
    patch_list = [np.asarray(s.patches, dtype=np.float64) for s in samples]
    sigma = np.zeros((len(samples), len(seen)))
    variant = "naive" if mode == "naive_match" else "ot"
    plan_mode = "uniform" if mode == "no_ot" else "sinkhorn"
    for rows, patches in group_by_patch_count(patch_list, np.arange(len(samples))):
        q_override = None
        if mode == "random_select":
            n_patch = patches.shape[1]
            scores = np.stack([
                generator(cfg.seed, TAG_RANDOM_SELECT,
                          stable_text_key(samples[int(r)].image_id)).random(n_patch)
                for r in rows])
            q_override = np.broadcast_to(scores[:, None, :],
                                         (len(rows), len(seen), n_patch))
        elif mode == "prompt_select":
            v = adapt_batch(state.stacks[VISUAL_LOCAL],
                            patches.reshape(-1, state.dim), upto=stage)
            v = v.reshape(patches.shape)
            eos = adapt_batch(state.stacks[TEXTUAL_LOCAL], np.stack(
                [np.asarray(class_table[c].eos_embedding, dtype=np.float64)
                 for c in seen]), upto=stage)
            v_unit = v / np.linalg.norm(v, axis=-1, keepdims=True)
            e_unit = eos / np.linalg.norm(eos, axis=-1, keepdims=True)
            q_override = np.einsum("imd,cd->icm", v_unit, e_unit)
        res = batched_sigma(patches, attrs_raw,
                            state.stacks[VISUAL_LOCAL], state.stacks[TEXTUAL_LOCAL],
                            cfg.top_k, cfg.sinkhorn_reg, cfg.sinkhorn_tol,
                            cfg.sinkhorn_max_iter, upto=stage, variant=variant,
                            plan_mode=plan_mode, q_override=q_override)
        sigma[rows] = res["sigma"]
    return sigma


def predict_batch(state: EngineState, class_table: dict, samples: list,
                  mode: str, beta: float | None = None,
                  stage: int | None = None) -> tuple:
    """(dense predictions, global scores, local scores or None, fused scores).

    Global scores are cosines of the adapted [CLS] and [EOS] features;
    local scores are the transport scores, so fusion is
    f_global + beta * f_local with both terms on the cosine scale.
    stage truncates the projector stacks to evaluate the model exactly as
    it stood after that session; default is the latest.
    """
    if stage is None:
        stage = state.num_sessions
    if stage < 1:
        raise ValueError("prediction requires at least one trained session")
    if beta is None:
        beta = state.config.local_weight
    seen = state.classes_up_to(stage)
    cfg = state.config
    cls_feats = np.stack([np.asarray(s.cls, dtype=np.float64) for s in samples])
    eos_raw = np.stack([np.asarray(class_table[c].eos_embedding, dtype=np.float64)
                        for c in seen])
    if mode == "zero_shot":
        v_unit = cls_feats / np.linalg.norm(cls_feats, axis=1, keepdims=True)
        e_unit = eos_raw / np.linalg.norm(eos_raw, axis=1, keepdims=True)
        f_global = (v_unit @ e_unit.T) / cfg.temperature
        return np.argmax(f_global, axis=1), f_global, None, f_global
    v = adapt_batch(state.stacks[VISUAL_GLOBAL], cls_feats, upto=stage)
    t = adapt_batch(state.stacks[TEXTUAL_GLOBAL], eos_raw, upto=stage)
    v_unit = v / np.linalg.norm(v, axis=1, keepdims=True)
    t_unit = t / np.linalg.norm(t, axis=1, keepdims=True)
    f_global = v_unit @ t_unit.T
    if mode == "global_only":
        return np.argmax(f_global, axis=1), f_global, None, f_global
    if mode not in LOCAL_MODES:
        raise ValueError(f"unknown evaluation mode {mode!r}")
    f_local = _local_scores(state, class_table, samples, seen, mode, stage)
    fused = f_global + beta * f_local
    return np.argmax(fused, axis=1), f_global, f_local, fused


def predict(sample, state: EngineState, class_table: dict, mode: str = "full",
            beta: float | None = None, stage: int | None = None) -> PredictResult:
    """Single-image prediction (see predict_batch)."""
    pred, f_global, f_local, fused = predict_batch(
        state, class_table, [sample], mode, beta=beta, stage=stage)
    seen = state.classes_up_to(stage if stage is not None else state.num_sessions)
    idx = int(pred[0])
    return PredictResult(class_id=seen[idx], dense_index=idx,
                         f_global=f_global[0],
                         f_local=None if f_local is None else f_local[0],
                         fused=fused[0])


def evaluate_stage(state: EngineState, bundle: EmbeddingBundle, test_samples: list,
                   stage: int, mode: str, beta: float | None = None) -> dict:
    """Accuracy after session `stage` over every class seen so far.

    Returns overall accuracy plus the per-origin-session breakdown
    A_{stage,b} (accuracy on the classes introduced in session b).
    """
    seen = state.classes_up_to(stage)
    seen_set = set(seen)
    origin = {cid: s for s, sess in enumerate(state.sessions[:stage], 1) for cid in sess}
    eligible = [s for s in test_samples if s.label in seen_set]
    if not eligible:
        raise ValueError(f"no test samples for stage {stage}")
    class_table = bundle.class_by_id()
    dense = {cid: i for i, cid in enumerate(seen)}
    preds, _, _, _ = predict_batch(state, class_table, eligible, mode,
                                   beta=beta, stage=stage)
    labels = np.asarray([dense[s.label] for s in eligible])
    correct = preds == labels
    per_origin = []
    for b in range(1, stage + 1):
        rows = [i for i, s in enumerate(eligible) if origin[s.label] == b]
        per_origin.append(100.0 * float(np.mean(correct[rows])) if rows else 0.0)
    return {
        "session": stage,
        "num_classes": len(seen),
        "accuracy": 100.0 * float(np.mean(correct)),
        "per_origin": per_origin,
    }


def build_report(stage_results: list, mode: str, beta: float) -> SessionReport:
    matrix = AccuracyMatrix(rows=[r["per_origin"] for r in stage_results])
    accs = [r["accuracy"] for r in stage_results]
    return SessionReport(
        mode=mode,
        beta=float(beta),
        session_accuracies=accs,
        matrix=matrix,
        num_classes_per_session=[r["num_classes"] for r in stage_results],
        average_accuracy=float(np.mean(accs)),
        last_accuracy=accs[-1],
        forgetting=forgetting_measure(matrix) if len(accs) > 1 else None,
    )


def run_full_evaluation(state: EngineState, bundle: EmbeddingBundle, test_samples: list,
                        mode: str, beta: float | None = None) -> SessionReport:
    """Rebuild the whole accuracy matrix from a trained state."""
    if beta is None:
        beta = state.config.local_weight
    results = [evaluate_stage(state, bundle, test_samples, stage, mode, beta=beta)
               for stage in range(1, state.num_sessions + 1)]
    return build_report(results, mode, beta)


def write_report(report: SessionReport, out_dir: str, config_dict: dict | None = None) -> None:
    """report.json (full precision) + report/curve/matrix CSVs (2 decimals)."""
    os.makedirs(out_dir, exist_ok=True)
    payload = {
        "mode": report.mode,
        "beta": report.beta,
        "num_sessions": len(report.session_accuracies),
        "num_classes_per_session": report.num_classes_per_session,
        "sessions": [
            {"session": i + 1,
             "num_classes": report.num_classes_per_session[i],
             "accuracy": report.session_accuracies[i],
             "per_origin": report.matrix.rows[i]}
            for i in range(len(report.session_accuracies))
        ],
        "average_accuracy": report.average_accuracy,
        "last_accuracy": report.last_accuracy,
        "forgetting": report.forgetting,
    }
    if config_dict is not None:
        payload["config"] = config_dict
    _atomic_write(os.path.join(out_dir, "report.json"),
                  (json.dumps(payload, sort_keys=True, indent=2) + "\n").encode("utf-8"))

    buf = io.StringIO()
    w = csv.writer(buf, lineterminator="\n")
    w.writerow(["session", "num_classes", "accuracy"])
    for i, acc in enumerate(report.session_accuracies):
        w.writerow([i + 1, report.num_classes_per_session[i], f"{acc:.2f}"])
    _atomic_write(os.path.join(out_dir, "report.csv"), buf.getvalue().encode("utf-8"))

    buf = io.StringIO()
    w = csv.writer(buf, lineterminator="\n")
    w.writerow(["session", "accuracy", "mode"])
    for i, acc in enumerate(report.session_accuracies):
        w.writerow([i + 1, f"{acc:.2f}", report.mode])
    _atomic_write(os.path.join(out_dir, "curve.csv"), buf.getvalue().encode("utf-8"))

    buf = io.StringIO()
    w = csv.writer(buf, lineterminator="\n")
    for row in report.matrix.rows:
        w.writerow([f"{a:.2f}" for a in row])
    _atomic_write(os.path.join(out_dir, "matrix.csv"), buf.getvalue().encode("utf-8"))


def zero_shot_report(bundle: EmbeddingBundle, class_ids: list, test_samples: list,
                     temperature: float) -> SessionReport:
    """Single-stage zero-shot baseline over the given classes (no training)."""
    class_table = bundle.class_by_id()
    eligible = [s for s in test_samples if s.label in set(class_ids)]
    if not eligible:
        raise ValueError("no test samples for zero-shot report")
    eos_raw = np.stack([np.asarray(class_table[c].eos_embedding, dtype=np.float64)
                        for c in class_ids])
    cls_feats = np.stack([np.asarray(s.cls, dtype=np.float64) for s in eligible])
    v_unit = cls_feats / np.linalg.norm(cls_feats, axis=1, keepdims=True)
    e_unit = eos_raw / np.linalg.norm(eos_raw, axis=1, keepdims=True)
    logits = (v_unit @ e_unit.T) / temperature
    dense = {cid: i for i, cid in enumerate(class_ids)}
    labels = np.asarray([dense[s.label] for s in eligible])
    acc = 100.0 * float(np.mean(np.argmax(logits, axis=1) == labels))
    matrix = AccuracyMatrix(rows=[[acc]])
    return SessionReport(mode="zero_shot", beta=0.0, session_accuracies=[acc],
                         matrix=matrix, num_classes_per_session=[len(class_ids)],
                         average_accuracy=acc, last_accuracy=acc, forgetting=None)
