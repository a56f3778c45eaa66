"""Encoders. Ships one: a seeded random projection good enough to exercise
every format and pipeline path without model weights.

Real deployments would register a CLIP-style encoder here; both modalities
must land in the same d-dimensional space and images must come back as
[CLS] plus patch rows.
"""

import hashlib
import warnings

import numpy as np

TEXT_CONTEXT_CHARS = 512


class UnknownEncoder(ValueError):
    pass


def _projection(d: int) -> np.ndarray:
    # one fixed 256 -> d map shared by both modalities
    rng = np.random.default_rng(np.random.SeedSequence(entropy=0xA11CE, spawn_key=(d,)))
    return rng.standard_normal((256, d))


def _positions(count: int, d: int) -> np.ndarray:
    rng = np.random.default_rng(np.random.SeedSequence(entropy=0xBEEF, spawn_key=(count, d)))
    return rng.standard_normal((count, d))


def _histogram(chunk: bytes) -> np.ndarray:
    h = np.bincount(np.frombuffer(chunk, dtype=np.uint8), minlength=256).astype(np.float64)
    total = h.sum()
    return h / total if total else h


class StubEncoder:
    """Byte-histogram random projection: deterministic, dimension 16, 4 patches."""

    encoder_id = "stub"
    d = 16
    patches = 4

    def __init__(self):
        self._proj = _projection(self.d)
        self._pos = _positions(self.patches + 1, self.d)

    def _rows(self, data: bytes, count: int, pos: np.ndarray) -> np.ndarray:
        step = max(1, -(-len(data) // count)) if data else 1
        rows = np.empty((count, self.d))
        for i in range(count):
            chunk = data[i * step:(i + 1) * step]
            rows[i] = _histogram(chunk) @ self._proj + pos[i]
        return rows.astype(np.float32)

    def encode_image(self, data: bytes) -> tuple:
        """(cls (d,), patches (M, d)) for one image's raw bytes."""
        rows = self._rows(data, self.patches + 1, self._pos)
        return rows[0], rows[1:]

    def encode_text(self, text: str) -> np.ndarray:
        if not text or not text.strip():
            raise ValueError("cannot encode empty text")
        if len(text) > TEXT_CONTEXT_CHARS:
            warnings.warn(f"text truncated to {TEXT_CONTEXT_CHARS} chars: {text[:40]!r}...")
            text = text[:TEXT_CONTEXT_CHARS]
        data = text.encode("utf-8")
        # texts get a content-derived position so distinct strings with equal
        # histograms still separate
        seed = int.from_bytes(hashlib.blake2b(data, digest_size=8).digest(), "big")
        rng = np.random.default_rng(np.random.SeedSequence(entropy=seed, spawn_key=(2,)))
        pos = rng.standard_normal((1, self.d))
        return self._rows(data, 1, pos)[0]


def make_encoder(encoder_id: str):
    if encoder_id == "stub":
        return StubEncoder()
    raise UnknownEncoder(
        f"unknown encoder {encoder_id!r}; only 'stub' ships with this tool")
