"""End-to-end extraction: requests file in, bundle directory out.

The input is the engine's attribute_requests.json (a list of
{class_id, class_name, image_ids, prompt} objects).  Images live under
images_root/<class_name>/; every readable file there is encoded, and
the bundle image id is "<class_name>/<filename>".
"""

import json
import os
import warnings
from dataclasses import dataclass, field

import numpy as np

from .backends import generate_attributes, make_backend
from .bundle import validate_bundle_dir, write_bundle
from .encoder import make_encoder

CLASS_PROMPT = "a photo of a {class_name}"

REQUIRED_KEYS = ("class_id", "class_name", "image_ids", "prompt")


@dataclass
class ExtractionJob:
    images_root: str
    requests: list
    encoder_id: str = "stub"
    backend_id: str = "fixture"
    out_dir: str = "bundle"
    min_attrs: int = 5
    base_url: str = ""
    model: str = ""
    retries: int = 2
    backoff: float = 0.5


@dataclass
class JobSummary:
    out_dir: str
    num_images: int
    num_classes: int
    skipped: list = field(default_factory=list)
    notes: dict = field(default_factory=dict)
    problems: list = field(default_factory=list)


def load_requests(path: str) -> list:
    with open(path, "rb") as fh:
        data = json.loads(fh.read().decode("utf-8"))
    if not isinstance(data, list) or not data:
        raise ValueError(f"{path}: expected a non-empty list of requests")
    seen = set()
    for i, req in enumerate(data):
        for key in REQUIRED_KEYS:
            if key not in req:
                raise ValueError(f"{path}: request {i} missing {key!r}")
        cid = int(req["class_id"])
        if cid in seen:
            raise ValueError(f"{path}: duplicate request for class {cid}")
        seen.add(cid)
        if not str(req["class_name"]).strip():
            raise ValueError(f"{path}: request {i} has an empty class name")
    return data


def collect_images(images_root: str, class_name: str) -> list:
    """All regular files under the class directory, as (image_id, path),
    sorted by filename.  Entries resolving to the same file are collapsed."""
    class_dir = os.path.join(images_root, class_name)
    if not os.path.isdir(class_dir):
        return []
    out, seen = [], set()
    for name in sorted(os.listdir(class_dir)):
        path = os.path.join(class_dir, name)
        if not os.path.isfile(path):
            continue
        real = os.path.realpath(path)
        if real in seen:
            warnings.warn(f"duplicate image path {path}, keeping first")
            continue
        seen.add(real)
        out.append((f"{class_name}/{name}", path))
    return out


def run_job(job: ExtractionJob) -> JobSummary:
    encoder = make_encoder(job.encoder_id)
    backend = make_backend(job.backend_id, base_url=job.base_url, model=job.model)

    samples, classes = [], []
    skipped, notes = [], {}
    for req in job.requests:
        cid = int(req["class_id"])
        name = str(req["class_name"])

        for image_id, path in collect_images(job.images_root, name):
            try:
                with open(path, "rb") as fh:
                    data = fh.read()
            except OSError as exc:
                warnings.warn(f"skipping unreadable image {path}: {exc}")
                skipped.append(image_id)
                continue
            cls, patches = encoder.encode_image(data)
            samples.append((image_id, cid, cls, patches))

        shown = [os.path.join(job.images_root, rel) for rel in req["image_ids"]]
        missing = [p for p in shown if not os.path.isfile(p)]
        if missing:
            warnings.warn(f"{len(missing)} requested image(s) for {name!r} "
                          "not on disk; describer sees the rest")
        shown = [p for p in shown if os.path.isfile(p)]

        attrs, note = generate_attributes(
            backend, req["prompt"], name, shown, job.min_attrs,
            retries=job.retries, backoff=job.backoff)
        if note:
            notes[name] = note

        eos = encoder.encode_text(CLASS_PROMPT.format(class_name=name))
        rows = np.stack([encoder.encode_text(t) for t in attrs])
        classes.append((cid, name, eos, attrs, rows))

    provenance = {
        "tool": "otcil-extract",
        "encoder": job.encoder_id,
        "backend": job.backend_id,
        "notes": notes,
    }
    write_bundle(job.out_dir, encoder.d, samples, classes, provenance)
    problems = validate_bundle_dir(job.out_dir)
    return JobSummary(
        out_dir=job.out_dir,
        num_images=len(samples),
        num_classes=len(classes),
        skipped=skipped,
        notes=notes,
        problems=problems,
    )
