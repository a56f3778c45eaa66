"""Class-level visual semantics from frozen [CLS] features.

Builds, per class: the prototype (feature mean), the representative image
(closest to the prototype in cosine distance), and a small diverse set
(farthest from the representative).  These sample sets are what an
offline describer is asked about; `emit_attribute_manifest` serializes
those requests.  Nothing here reads patch tokens.
"""

import json
from dataclasses import dataclass

import numpy as np

from .corpus import EmbeddingBundle, _atomic_write

PROMPT_TEMPLATE = ("What are the key visual features for identifying a {class_name} "
                   "in these images? Focus on the most discriminative attributes.")

DEFAULT_DIVERSE = 3


@dataclass
class VisualSampleSet:
    class_id: int
    representative_id: str
    diverse_ids: list        # descending distance from the representative
    prototype: np.ndarray    # (d,) float64, un-normalized mean


def cosine_distance(a: np.ndarray, b: np.ndarray) -> float:
    """1 - cos(a, b); raises on zero-norm input."""
    a = np.asarray(a, dtype=np.float64)
    b = np.asarray(b, dtype=np.float64)
    na = np.linalg.norm(a)
    nb = np.linalg.norm(b)
    if na == 0.0 or nb == 0.0:
        raise ValueError("zero-norm embedding")
    return 1.0 - float(np.dot(a, b) / (na * nb))


def class_prototype(features: np.ndarray) -> np.ndarray:
    """Mean of the class's [CLS] features (float64, not normalized)."""
    feats = np.asarray(features, dtype=np.float64)
    if feats.ndim != 2 or feats.shape[0] < 1:
        raise ValueError("class_prototype needs a non-empty (n, d) feature matrix")
    return feats.mean(axis=0)


def representative_sample(image_ids, features, prototype) -> str:
    """Image id whose feature is nearest the prototype in cosine distance.

    Ties break to the lexicographically smallest id so the choice is
    stable under input reordering.
    """
    if len(image_ids) == 0:
        raise ValueError("representative_sample needs at least one sample")
    if len(image_ids) != len(features):
        raise ValueError("image_ids and features length mismatch")
    best_id = None
    best_dist = None
    for iid, feat in zip(image_ids, features):
        dist = cosine_distance(feat, prototype)
        if best_dist is None or dist < best_dist or (dist == best_dist and iid < best_id):
            best_id, best_dist = iid, dist
    return best_id


def diverse_set(image_ids, features, representative_id: str, n: int) -> list:
    """The n ids farthest (cosine) from the representative, excluding it.

    Ordered by descending distance, ties by smaller id; returns fewer than
    n when the class is small.
    """
    if n < 0:
        raise ValueError("n must be >= 0")
    id_to_feat = dict(zip(image_ids, features))
    if representative_id not in id_to_feat:
        raise ValueError(f"representative id {representative_id!r} not among samples")
    rep = id_to_feat[representative_id]
    scored = []
    for iid, feat in zip(image_ids, features):
        if iid == representative_id:
            continue
        scored.append((-cosine_distance(feat, rep), iid))
    scored.sort(key=lambda t: (t[0], t[1]))
    return [iid for _, iid in scored[:n]]


def build_visual_sample_sets(bundle: EmbeddingBundle, session_classes,
                             n_diverse: int = DEFAULT_DIVERSE) -> list:
    """VisualSampleSet per class, from [CLS] rows only."""
    by_class = {}
    for s in bundle.samples:
        by_class.setdefault(s.label, []).append(s)
    out = []
    for cid in session_classes:
        members = by_class.get(cid, [])
        if not members:
            raise ValueError(f"class {cid} has no samples")
        ids = [s.image_id for s in members]
        feats = [np.asarray(s.cls, dtype=np.float64) for s in members]
        proto = class_prototype(np.stack(feats))
        rep = representative_sample(ids, feats, proto)
        out.append(VisualSampleSet(
            class_id=cid,
            representative_id=rep,
            diverse_ids=diverse_set(ids, feats, rep, n_diverse),
            prototype=proto,
        ))
    return out


def emit_attribute_manifest(bundle: EmbeddingBundle, sample_sets, out_path: str) -> list:
    """Write attribute_requests.json: one describer request per class.

    Each request lists the class, the chosen image ids (representative
    first), and the exact prompt an attribute describer should answer.
    Returns the request list.
    """
    names = {c.class_id: c.class_name for c in bundle.classes}
    requests = []
    for ss in sample_sets:
        if ss.class_id not in names:
            raise ValueError(f"sample set for unknown class {ss.class_id}")
        name = names[ss.class_id]
        requests.append({
            "class_id": ss.class_id,
            "class_name": name,
            "image_ids": [ss.representative_id] + list(ss.diverse_ids),
            "prompt": PROMPT_TEMPLATE.format(class_name=name),
        })
    _atomic_write(out_path, (json.dumps(requests, sort_keys=True, indent=2) + "\n").encode("utf-8"))
    return requests
