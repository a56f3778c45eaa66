"""Writer and validator for the engine's bundle directory layout.

Independent implementation of the same on-disk contract the engine reads:

    manifest.json    magic "OTCIL", version 1, d, counts, image ids,
                     class table (names, attribute texts), provenance
    samples.f32      per image (1 + M) rows of d little-endian float32,
                     [CLS] first, manifest order
    labels.u32       one little-endian uint32 class id per image
    attributes.f32   per class (1 + A) rows, [EOS] first, class-table order
"""

import json
import os
import tempfile

import numpy as np

MAGIC = "OTCIL"
VERSION = 1

MANIFEST_NAME = "manifest.json"
SAMPLES_NAME = "samples.f32"
LABELS_NAME = "labels.u32"
ATTRIBUTES_NAME = "attributes.f32"


def _atomic(path: str, data: bytes) -> None:
    fd, tmp = tempfile.mkstemp(dir=os.path.dirname(path) or ".",
                               prefix=os.path.basename(path) + ".")
    try:
        with os.fdopen(fd, "wb") as fh:
            fh.write(data)
        os.replace(tmp, path)
    except BaseException:
        if os.path.exists(tmp):
            os.unlink(tmp)
        raise


def write_bundle(out_dir: str, d: int, samples: list, classes: list,
                 provenance: dict) -> None:
    """samples: (image_id, label, cls (d,), patches (M, d)) tuples;
    classes: (class_id, class_name, eos (d,), texts, attr_rows (A, d))."""
    os.makedirs(out_dir, exist_ok=True)
    m_list = [int(p.shape[0]) for _, _, _, p in samples]
    manifest = {
        "magic": MAGIC,
        "version": VERSION,
        "d": d,
        "num_samples": len(samples),
        "num_classes": len(classes),
        "M_per_sample": (m_list[0] if m_list and len(set(m_list)) == 1 else m_list),
        "image_ids": [sid for sid, _, _, _ in samples],
        "class_table": [
            {"class_id": int(cid), "class_name": name,
             "num_attributes": int(rows.shape[0]),
             "attribute_texts": list(texts)}
            for cid, name, _, texts, rows in classes
        ],
        "provenance": provenance,
    }
    sample_rows = []
    for _, _, cls, patches in samples:
        sample_rows.append(np.asarray(cls, dtype="<f4").reshape(1, d))
        sample_rows.append(np.asarray(patches, dtype="<f4").reshape(-1, d))
    attr_rows = []
    for _, _, eos, _, rows in classes:
        attr_rows.append(np.asarray(eos, dtype="<f4").reshape(1, d))
        attr_rows.append(np.asarray(rows, dtype="<f4").reshape(-1, d))

    _atomic(os.path.join(out_dir, MANIFEST_NAME),
            (json.dumps(manifest, sort_keys=True, indent=2) + "\n").encode("utf-8"))
    _atomic(os.path.join(out_dir, SAMPLES_NAME),
            np.concatenate(sample_rows).tobytes() if sample_rows else b"")
    _atomic(os.path.join(out_dir, LABELS_NAME),
            np.asarray([lab for _, lab, _, _ in samples], dtype="<u4").tobytes())
    _atomic(os.path.join(out_dir, ATTRIBUTES_NAME),
            np.concatenate(attr_rows).tobytes() if attr_rows else b"")


def validate_bundle_dir(path: str) -> list:
    """Re-check every load invariant from this side; [] means pass."""
    problems = []
    mpath = os.path.join(path, MANIFEST_NAME)
    if not os.path.isfile(mpath):
        return [f"missing {MANIFEST_NAME}"]
    try:
        with open(mpath, "rb") as fh:
            man = json.loads(fh.read().decode("utf-8"))
    except (ValueError, UnicodeDecodeError) as exc:
        return [f"manifest unreadable: {exc}"]

    if man.get("magic") != MAGIC:
        problems.append(f"magic mismatch: {man.get('magic')!r}")
    if man.get("version") != VERSION:
        problems.append(f"version mismatch: {man.get('version')!r}")
    for key in ("d", "num_samples", "num_classes", "M_per_sample",
                "image_ids", "class_table"):
        if key not in man:
            problems.append(f"manifest missing {key!r}")
    if problems:
        return problems

    d, n = int(man["d"]), int(man["num_samples"])
    if d < 1:
        problems.append(f"d={d} must be >= 1")
    ids = man["image_ids"]
    if len(ids) != n:
        problems.append(f"{len(ids)} image ids vs num_samples={n}")
    if len(set(ids)) != len(ids):
        problems.append("duplicate image ids")
    m_field = man["M_per_sample"]
    m_per = ([int(x) for x in m_field] if isinstance(m_field, list)
             else [int(m_field)] * n)
    if len(m_per) != n:
        problems.append(f"M_per_sample length {len(m_per)} vs {n}")
    if any(m < 1 for m in m_per):
        problems.append("patch counts must be >= 1")

    table = man["class_table"]
    if len(table) != int(man["num_classes"]):
        problems.append(f"{len(table)} class entries vs num_classes={man['num_classes']}")
    class_ids = set()
    attr_rows_expected = 0
    for e in table:
        cid = int(e["class_id"])
        if cid in class_ids:
            problems.append(f"duplicate class id {cid}")
        class_ids.add(cid)
        if not (0 <= cid < 2 ** 32):
            problems.append(f"class id {cid} outside uint32 range")
        if not e.get("class_name"):
            problems.append(f"class {cid} has empty name")
        a = int(e["num_attributes"])
        if a < 1:
            problems.append(f"class {cid} has no attributes")
        if len(e.get("attribute_texts", [])) != a:
            problems.append(f"class {cid}: text count vs num_attributes")
        attr_rows_expected += 1 + a
    if problems:
        return problems

    def blob(name, rows, itemsize, dtype):
        p = os.path.join(path, name)
        if not os.path.isfile(p):
            problems.append(f"missing {name}")
            return None
        size = os.path.getsize(p)
        want = rows * itemsize
        if size != want:
            problems.append(f"{name}: {size} bytes, expected {want}")
            return None
        return np.fromfile(p, dtype=dtype)

    sample_rows = sum(1 + m for m in m_per)
    samples = blob(SAMPLES_NAME, sample_rows * d, 4, "<f4")
    labels = blob(LABELS_NAME, n, 4, "<u4")
    attrs = blob(ATTRIBUTES_NAME, attr_rows_expected * d, 4, "<f4")
    if problems:
        return problems

    if samples is not None and samples.size and not np.isfinite(samples).all():
        problems.append(f"non-finite value in {SAMPLES_NAME}")
    if attrs is not None and attrs.size and not np.isfinite(attrs).all():
        problems.append(f"non-finite value in {ATTRIBUTES_NAME}")
    if labels is not None:
        stray = set(int(x) for x in labels) - class_ids
        if stray:
            problems.append(f"labels without class entries: {sorted(stray)}")
    return problems
