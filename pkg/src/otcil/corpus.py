"""Embedding bundles: on-disk format, validation, synthetic corpora, task splits.

A bundle is a directory of four files:

    manifest.json    magic "OTCIL", version 1, dimensions, image ids,
                     class table (names + attribute texts), provenance
    samples.f32      per image: (1 + M_i) rows of d float32, little endian,
                     [CLS] row first, then M_i patch rows; manifest order
    labels.u32       one uint32 class id per image, little endian
    attributes.f32   per class: (A_c + 1) rows of d float32, [EOS] row
                     first, then A_c attribute rows; class-table order

All embeddings are stored float32; compute paths promote to float64.
Loading is strict: magic/version/shape/finiteness violations raise
BundleError with the offending file and byte offset.
"""

import json
import math
import os
from dataclasses import dataclass, field

import numpy as np

from .rng import TAG_SCHEDULE, TAG_SYNTH, generator

MAGIC = "OTCIL"
VERSION = 1

MANIFEST_NAME = "manifest.json"
SAMPLES_NAME = "samples.f32"
LABELS_NAME = "labels.u32"
ATTRIBUTES_NAME = "attributes.f32"


class BundleError(ValueError):
    """Bundle format or content violation, with file/offset context."""

    def __init__(self, message: str, file: str = "", offset: int = -1):
        self.file = file
        self.offset = offset
        ctx = ""
        if file:
            ctx = f" [{file}" + (f" @ byte {offset}" if offset >= 0 else "") + "]"
        super().__init__(message + ctx)


@dataclass
class TokenEmbeddings:
    """Frozen encoder output for one image: [CLS] plus M patch tokens."""

    image_id: str
    label: int
    cls: np.ndarray      # (d,) float32
    patches: np.ndarray  # (M, d) float32


@dataclass
class ClassAttributeSet:
    """Per-class text side: attribute sentences and their embeddings."""

    class_id: int
    class_name: str
    attribute_texts: list
    attribute_embeddings: np.ndarray  # (A, d) float32
    eos_embedding: np.ndarray         # (d,) float32


@dataclass
class EmbeddingBundle:
    dimension: int
    samples: list            # list[TokenEmbeddings]
    classes: list            # list[ClassAttributeSet]
    provenance: dict = field(default_factory=dict)
    splits: list | None = None  # optional per-sample "train"/"test" markers

    def class_by_id(self) -> dict:
        return {c.class_id: c for c in self.classes}

    def class_ids(self) -> list:
        return [c.class_id for c in self.classes]


@dataclass
class TaskSchedule:
    """Class-incremental session layout: base session plus increments."""

    base_size: int
    increment: int
    seed: int
    sessions: list  # list[list[int]], class ids per session

    @property
    def num_sessions(self) -> int:
        return len(self.sessions)


def validate_bundle(bundle: EmbeddingBundle) -> None:
    """Check every bundle invariant; raise BundleError on the first failure.

    Covers: positive dimension, per-sample shapes and finiteness, unique
    image ids, unique class ids, every label backed by a class entry,
    attribute sets non-empty with consistent dimensions.
    """
    d = bundle.dimension
    if d < 1:
        raise BundleError(f"dimension mismatch: d={d} must be >= 1")
    seen_ids = set()
    known_classes = set()
    for c in bundle.classes:
        if c.class_id in known_classes:
            raise BundleError(f"duplicate class id {c.class_id}")
        known_classes.add(c.class_id)
        if not (0 <= c.class_id < 2 ** 32):
            raise BundleError(f"class id {c.class_id} outside uint32 range")
        if not c.class_name:
            raise BundleError(f"class {c.class_id} has empty name")
        emb = np.asarray(c.attribute_embeddings)
        if emb.ndim != 2 or emb.shape[0] < 1 or emb.shape[1] != d:
            raise BundleError(
                f"dimension mismatch: class {c.class_id} attribute embeddings "
                f"shape {emb.shape}, expected (>=1, {d})")
        if len(c.attribute_texts) != emb.shape[0]:
            raise BundleError(
                f"class {c.class_id}: {len(c.attribute_texts)} attribute texts "
                f"vs {emb.shape[0]} embeddings")
        eos = np.asarray(c.eos_embedding)
        if eos.shape != (d,):
            raise BundleError(
                f"dimension mismatch: class {c.class_id} eos shape {eos.shape}, expected ({d},)")
        if not np.isfinite(emb).all() or not np.isfinite(eos).all():
            raise BundleError(f"non-finite value in class {c.class_id} attribute embeddings")
    for i, s in enumerate(bundle.samples):
        if s.image_id in seen_ids:
            raise BundleError(f"duplicate image id {s.image_id!r}")
        seen_ids.add(s.image_id)
        cls = np.asarray(s.cls)
        patches = np.asarray(s.patches)
        if cls.shape != (d,):
            raise BundleError(
                f"dimension mismatch: sample {s.image_id!r} cls shape {cls.shape}, expected ({d},)")
        if patches.ndim != 2 or patches.shape[0] < 1 or patches.shape[1] != d:
            raise BundleError(
                f"dimension mismatch: sample {s.image_id!r} patches shape {patches.shape}, "
                f"expected (>=1, {d})")
        if not np.isfinite(cls).all() or not np.isfinite(patches).all():
            raise BundleError(f"non-finite value in sample {s.image_id!r}")
        if s.label not in known_classes:
            raise BundleError(f"label without attribute set: sample {i} label {s.label}")
    if bundle.splits is not None:
        if len(bundle.splits) != len(bundle.samples):
            raise BundleError(
                f"splits length {len(bundle.splits)} vs {len(bundle.samples)} samples")
        for v in bundle.splits:
            if v not in ("train", "test"):
                raise BundleError(f"invalid split marker {v!r}")


def write_bundle(bundle: EmbeddingBundle, path: str) -> None:
    """Serialize a validated bundle to a directory (refuses invalid input)."""
    validate_bundle(bundle)
    os.makedirs(path, exist_ok=True)
    d = bundle.dimension
    m_list = [int(s.patches.shape[0]) for s in bundle.samples]
    m_field = m_list[0] if len(set(m_list)) == 1 and m_list else m_list
    manifest = {
        "magic": MAGIC,
        "version": VERSION,
        "d": d,
        "num_samples": len(bundle.samples),
        "num_classes": len(bundle.classes),
        "M_per_sample": m_field,
        "image_ids": [s.image_id for s in bundle.samples],
        "class_table": [
            {
                "class_id": c.class_id,
                "class_name": c.class_name,
                "num_attributes": int(np.asarray(c.attribute_embeddings).shape[0]),
                "attribute_texts": list(c.attribute_texts),
            }
            for c in bundle.classes
        ],
        "provenance": bundle.provenance,
    }
    if bundle.splits is not None:
        manifest["splits"] = list(bundle.splits)

    sample_rows = []
    for s in bundle.samples:
        sample_rows.append(np.asarray(s.cls, dtype="<f4").reshape(1, d))
        sample_rows.append(np.asarray(s.patches, dtype="<f4").reshape(-1, d))
    samples_blob = np.concatenate(sample_rows, axis=0).tobytes() if sample_rows else b""
    labels_blob = np.asarray([s.label for s in bundle.samples], dtype="<u4").tobytes()
    attr_rows = []
    for c in bundle.classes:
        attr_rows.append(np.asarray(c.eos_embedding, dtype="<f4").reshape(1, d))
        attr_rows.append(np.asarray(c.attribute_embeddings, dtype="<f4").reshape(-1, d))
    attr_blob = np.concatenate(attr_rows, axis=0).tobytes() if attr_rows else b""

    _atomic_write(os.path.join(path, MANIFEST_NAME),
                  (json.dumps(manifest, sort_keys=True, indent=2) + "\n").encode("utf-8"))
    _atomic_write(os.path.join(path, SAMPLES_NAME), samples_blob)
    _atomic_write(os.path.join(path, LABELS_NAME), labels_blob)
    _atomic_write(os.path.join(path, ATTRIBUTES_NAME), attr_blob)


def load_bundle(path: str) -> EmbeddingBundle:
    """Load and fully validate a bundle directory."""
    mpath = os.path.join(path, MANIFEST_NAME)
    if not os.path.isfile(mpath):
        raise BundleError("missing file", file=MANIFEST_NAME)
    with open(mpath, "rb") as fh:
        try:
            manifest = json.loads(fh.read().decode("utf-8"))
        except (ValueError, UnicodeDecodeError) as exc:
            raise BundleError(f"manifest parse failure: {exc}", file=MANIFEST_NAME) from exc
    if manifest.get("magic") != MAGIC:
        raise BundleError(f"magic mismatch: {manifest.get('magic')!r}", file=MANIFEST_NAME)
    if manifest.get("version") != VERSION:
        raise BundleError(f"version mismatch: {manifest.get('version')!r}", file=MANIFEST_NAME)
    for key in ("d", "num_samples", "num_classes", "M_per_sample", "image_ids", "class_table"):
        if key not in manifest:
            raise BundleError(f"manifest missing key {key!r}", file=MANIFEST_NAME)
    d = int(manifest["d"])
    n = int(manifest["num_samples"])
    if d < 1:
        raise BundleError(f"dimension mismatch: d={d}", file=MANIFEST_NAME)
    image_ids = manifest["image_ids"]
    if len(image_ids) != n:
        raise BundleError(f"{len(image_ids)} image ids vs num_samples={n}", file=MANIFEST_NAME)
    m_field = manifest["M_per_sample"]
    if isinstance(m_field, list):
        if len(m_field) != n:
            raise BundleError(f"M_per_sample list length {len(m_field)} vs {n}", file=MANIFEST_NAME)
        m_per = [int(m) for m in m_field]
    else:
        m_per = [int(m_field)] * n
    if any(m < 1 for m in m_per):
        raise BundleError("M_per_sample entries must be >= 1", file=MANIFEST_NAME)

    labels = _read_u32(os.path.join(path, LABELS_NAME), LABELS_NAME, n)
    sample_rows = sum(1 + m for m in m_per)
    samples_flat = _read_f32(os.path.join(path, SAMPLES_NAME), SAMPLES_NAME, sample_rows, d)
    class_rows = sum(1 + int(e["num_attributes"]) for e in manifest["class_table"])
    attrs_flat = _read_f32(os.path.join(path, ATTRIBUTES_NAME), ATTRIBUTES_NAME, class_rows, d)

    classes = []
    row = 0
    for entry in manifest["class_table"]:
        a = int(entry["num_attributes"])
        texts = list(entry["attribute_texts"])
        if len(texts) != a:
            raise BundleError(
                f"class {entry['class_id']}: {len(texts)} texts vs num_attributes={a}",
                file=MANIFEST_NAME)
        classes.append(ClassAttributeSet(
            class_id=int(entry["class_id"]),
            class_name=str(entry["class_name"]),
            attribute_texts=texts,
            attribute_embeddings=attrs_flat[row + 1: row + 1 + a].copy(),
            eos_embedding=attrs_flat[row].copy(),
        ))
        row += 1 + a

    samples = []
    row = 0
    for i in range(n):
        m = m_per[i]
        samples.append(TokenEmbeddings(
            image_id=str(image_ids[i]),
            label=int(labels[i]),
            cls=samples_flat[row].copy(),
            patches=samples_flat[row + 1: row + 1 + m].copy(),
        ))
        row += 1 + m

    bundle = EmbeddingBundle(
        dimension=d,
        samples=samples,
        classes=classes,
        provenance=manifest.get("provenance", {}),
        splits=list(manifest["splits"]) if "splits" in manifest else None,
    )
    try:
        validate_bundle(bundle)
    except BundleError:
        raise
    return bundle


def _read_f32(fpath: str, fname: str, expected_rows: int, d: int) -> np.ndarray:
    if not os.path.isfile(fpath):
        raise BundleError("missing file", file=fname)
    with open(fpath, "rb") as fh:
        blob = fh.read()
    expected = expected_rows * d * 4
    if len(blob) != expected:
        # A clean multiple of the row count with a different width means the
        # writer used another d; anything else is truncation/corruption.
        if expected_rows > 0 and len(blob) % (expected_rows * 4) == 0:
            implied = len(blob) // (expected_rows * 4)
            if implied != d:
                raise BundleError(
                    f"dimension mismatch: blob implies d={implied}, manifest d={d}",
                    file=fname, offset=len(blob))
        raise BundleError(
            f"blob length mismatch: expected {expected} bytes, found {len(blob)}",
            file=fname, offset=min(len(blob), expected))
    arr = np.frombuffer(blob, dtype="<f4").reshape(expected_rows, d).copy() if expected else \
        np.zeros((0, d), dtype=np.float32)
    bad = np.flatnonzero(~np.isfinite(arr))
    if bad.size:
        raise BundleError("non-finite value", file=fname, offset=int(bad[0]) * 4)
    return arr


def _read_u32(fpath: str, fname: str, expected: int) -> np.ndarray:
    if not os.path.isfile(fpath):
        raise BundleError("missing file", file=fname)
    with open(fpath, "rb") as fh:
        blob = fh.read()
    if len(blob) != expected * 4:
        raise BundleError(
            f"blob length mismatch: expected {expected * 4} bytes, found {len(blob)}",
            file=fname, offset=min(len(blob), expected * 4))
    if expected == 0:
        return np.zeros(0, dtype=np.uint32)
    return np.frombuffer(blob, dtype="<u4").copy()


def _atomic_write(fpath: str, data: bytes) -> None:
    tmp = fpath + ".tmp"
    with open(tmp, "wb") as fh:
        fh.write(data)
        fh.flush()
        os.fsync(fh.fileno())
    os.replace(tmp, fpath)


# ---------------------------------------------------------------------------
# Synthetic corpus
# ---------------------------------------------------------------------------

@dataclass
class SyntheticSpec:
    num_classes: int = 20
    per_class: int = 50
    dim: int = 16
    patches: int = 16
    attributes_per_class: int = 5
    noise_scale: float = 0.3


# Construction constants.  Classes come in pairs that share a coarse
# direction; the [CLS] row is dominated by it, while the pair members
# differ only in their fine attribute directions, which appear cleanly in
# the patch rows.  That makes the global head hit a ceiling the local
# patch-attribute matching can clear.  Confuser patches copy a single
# attribute of the pair partner: max-pooled matching credits them fully,
# while the balanced transport plan caps any one attribute's share.  Eos
# drift opens a further gap between raw text and visual means so training
# has something to learn.
_BACKGROUND_POOL = 8
_RELEVANT_FRACTION = 0.3125
_CONTEXT_FRACTION = 0.25
_CONFUSER_FRACTION = 0.1875
_COARSE_IN_CLS = 2.0
_FINE_IN_CLS = 0.3
_EOS_COARSE = 1.0
_EOS_DRIFT = 0.6
_CLS_NOISE = 0.45


def _unit(v: np.ndarray) -> np.ndarray:
    nrm = np.linalg.norm(v, axis=-1, keepdims=True)
    return v / nrm


def generate_synthetic(spec: SyntheticSpec, seed: int) -> EmbeddingBundle:
    """Deterministic synthetic bundle with attribute-structured patches.

    Classes are grouped into pairs sharing a random coarse unit direction.
    Each class additionally owns ``attributes_per_class`` fine unit
    directions.  An image mixes three patch kinds: relevant (noisy copies
    of fine attribute directions), context (noisy copies of the shared
    coarse direction), and background clutter from a global pool.  The
    [CLS] row leans on the coarse direction with only a faint fine
    component, so pair members collide there; attribute embeddings are the
    exact fine directions, so patch-level matching separates them.
    """
    if spec.num_classes < 1 or spec.per_class < 1 or spec.dim < 1 or spec.patches < 1 \
            or spec.attributes_per_class < 1:
        raise ValueError("synthetic spec counts must be >= 1")
    if spec.noise_scale < 0:
        raise ValueError("noise_scale must be >= 0")
    rng = generator(seed, TAG_SYNTH)
    d = spec.dim
    n_attr = spec.attributes_per_class
    n_pairs = (spec.num_classes + 1) // 2
    coarse_dirs = _unit(rng.standard_normal((n_pairs, d)))
    attr_dirs = _unit(rng.standard_normal((spec.num_classes, n_attr, d)))
    bg_dirs = _unit(rng.standard_normal((_BACKGROUND_POOL, d)))
    eos_drift_dirs = _unit(rng.standard_normal((spec.num_classes, d)))

    n_rel = max(1, math.ceil(spec.patches * _RELEVANT_FRACTION))
    n_ctx = min(spec.patches - n_rel, max(1, math.ceil(spec.patches * _CONTEXT_FRACTION)))
    n_conf = min(spec.patches - n_rel - n_ctx,
                 math.ceil(spec.patches * _CONFUSER_FRACTION))
    n_bg = spec.patches - n_rel - n_ctx - n_conf
    classes = []
    samples = []
    for c in range(spec.num_classes):
        coarse = coarse_dirs[c // 2]
        partner = c + 1 if c % 2 == 0 and c + 1 < spec.num_classes else c - 1
        partner = max(partner, 0)
        fine_mean = _unit(attr_dirs[c].mean(axis=0))
        eos = _unit(fine_mean + _EOS_COARSE * coarse + _EOS_DRIFT * eos_drift_dirs[c])
        classes.append(ClassAttributeSet(
            class_id=c,
            class_name=f"class_{c:03d}",
            attribute_texts=[f"synthetic attribute {c}.{j}" for j in range(n_attr)],
            attribute_embeddings=attr_dirs[c].astype(np.float32),
            eos_embedding=eos.astype(np.float32),
        ))
        for i in range(spec.per_class):
            which_attr = rng.integers(0, n_attr, size=n_rel)
            conf_attr = rng.integers(0, n_attr)
            which_bg = rng.integers(0, _BACKGROUND_POOL, size=n_bg)
            base = np.concatenate([
                attr_dirs[c][which_attr],
                np.broadcast_to(coarse, (n_ctx, d)),
                np.broadcast_to(attr_dirs[partner][conf_attr], (n_conf, d)),
                bg_dirs[which_bg],
            ], axis=0)
            noise = rng.standard_normal((spec.patches, d)) / math.sqrt(d)
            patches = _unit(base + spec.noise_scale * noise)
            cls_noise = rng.standard_normal(d) / math.sqrt(d)
            cls = _unit(_COARSE_IN_CLS * coarse
                        + _FINE_IN_CLS * _unit(attr_dirs[c][which_attr].mean(axis=0))
                        + _CLS_NOISE * cls_noise)
            samples.append(TokenEmbeddings(
                image_id=f"img_{c:03d}_{i:04d}",
                label=c,
                cls=cls.astype(np.float32),
                patches=patches.astype(np.float32),
            ))

    return EmbeddingBundle(
        dimension=d,
        samples=samples,
        classes=classes,
        provenance={
            "generator": "synthetic",
            "seed": int(seed),
            "num_classes": spec.num_classes,
            "per_class": spec.per_class,
            "dim": d,
            "patches": spec.patches,
            "attributes_per_class": n_attr,
            "noise_scale": spec.noise_scale,
        },
    )


# ---------------------------------------------------------------------------
# Task schedule
# ---------------------------------------------------------------------------

def split_tasks(class_ids, base_size: int, increment: int, seed: int) -> TaskSchedule:
    """Partition classes into a base session plus fixed-size increments.

    Class ids are canonically sorted, then shuffled with the seeded PRNG.
    The first session takes ``base_size`` classes (or ``increment`` when
    base_size is 0); every later session takes ``increment``, with any
    remainder forming a final smaller session.
    """
    ids = sorted(int(c) for c in class_ids)
    if len(ids) != len(set(ids)):
        raise ValueError("duplicate class id in schedule input")
    total = len(ids)
    if total == 0:
        raise ValueError("degenerate schedule: no classes")
    if increment < 1:
        raise ValueError(f"increment must be >= 1, got {increment}")
    if base_size < 0 or base_size > total:
        raise ValueError(f"base_size must be in [0, {total}], got {base_size}")
    first = base_size if base_size > 0 else increment
    if base_size > 0 and base_size + increment > total:
        raise ValueError("degenerate schedule: no room for an incremental session")
    if base_size == 0 and increment > total:
        raise ValueError("degenerate schedule: increment exceeds class count")

    rng = generator(seed, TAG_SCHEDULE)
    order = [ids[i] for i in rng.permutation(total)]
    sessions = [order[:first]]
    pos = first
    while pos < total:
        sessions.append(order[pos: pos + increment])
        pos += increment
    return TaskSchedule(base_size=base_size, increment=increment, seed=int(seed),
                        sessions=sessions)
