"""Additive per-session affine projectors.

Each branch (visual/textual x local/global) owns an ordered stack of
affine maps, one per session.  Adapting a feature sums every projector's
output, so earlier sessions keep contributing while only the newest map
trains.  Session 1 initializes to identity (exact passthrough); later
sessions initialize to zero (exact continuity at the session boundary).

Parameters are float32 at rest: every mutation rounds through float32, so
snapshots and checkpoints reproduce the live state bit-exactly.  Compute
happens in float64.
"""

import json
import struct
import zlib
from dataclasses import dataclass, field

import numpy as np

VISUAL_LOCAL = "visual_local"
TEXTUAL_LOCAL = "textual_local"
VISUAL_GLOBAL = "visual_global"
TEXTUAL_GLOBAL = "textual_global"
BRANCHES = (VISUAL_LOCAL, TEXTUAL_LOCAL, VISUAL_GLOBAL, TEXTUAL_GLOBAL)

_SNAP_MAGIC = b"OTCILSTK"


class CheckpointError(ValueError):
    pass


@dataclass
class Projector:
    weight: np.ndarray  # (d, d) float32
    bias: np.ndarray    # (d,) float32
    task_index: int     # 1-based session of introduction
    frozen: bool = False


@dataclass
class ProjectorStack:
    branch: str
    projectors: list = field(default_factory=list)

    @property
    def dimension(self) -> int:
        if not self.projectors:
            raise ValueError("empty stack has no dimension")
        return self.projectors[0].weight.shape[0]

    @property
    def current(self) -> Projector:
        return self.projectors[-1]


def begin_task(stack: ProjectorStack, d: int, seed: int | None = None) -> ProjectorStack:
    """Freeze every existing projector and append the next session's map.

    The first projector is the identity so session 1 starts from the raw
    feature space; later projectors start at zero so the adapted feature
    is unchanged at the moment a session begins.  Initialization is
    deterministic; ``seed`` is accepted for signature stability and unused.
    """
    if stack.projectors and stack.dimension != d:
        raise ValueError(f"stack dimension {stack.dimension} != requested {d}")
    for p in stack.projectors:
        p.frozen = True
    task = len(stack.projectors) + 1
    if task == 1:
        weight = np.eye(d, dtype=np.float32)
    else:
        weight = np.zeros((d, d), dtype=np.float32)
    stack.projectors.append(Projector(
        weight=weight,
        bias=np.zeros(d, dtype=np.float32),
        task_index=task,
        frozen=False,
    ))
    return stack


def adapt_batch(stack: ProjectorStack, feats: np.ndarray, upto: int | None = None) -> np.ndarray:
    """Sum of every projector's affine output, row-wise, in float64.

    ``upto`` truncates the stack to its first ``upto`` projectors, which
    reconstructs the adapted space exactly as it was at the end of that
    session (frozen maps never change afterwards).
    """
    if not stack.projectors:
        raise ValueError("adapt on empty stack")
    use = stack.projectors if upto is None else stack.projectors[:upto]
    if not use:
        raise ValueError("upto must keep at least one projector")
    x = np.asarray(feats, dtype=np.float64)
    if x.ndim != 2 or x.shape[1] != stack.dimension:
        raise ValueError(f"expected (n, {stack.dimension}) features, got {x.shape}")
    out = np.zeros_like(x)
    for p in use:
        out += x @ p.weight.astype(np.float64).T + p.bias.astype(np.float64)
    return out


def adapt_feature(stack: ProjectorStack, feat: np.ndarray, upto: int | None = None) -> np.ndarray:
    return adapt_batch(stack, np.asarray(feat)[None, :], upto=upto)[0]


def snapshot(stack: ProjectorStack) -> bytes:
    """Serialize a stack: header JSON + float32 payload, CRC32 guarded."""
    meta = {
        "branch": stack.branch,
        "d": stack.dimension if stack.projectors else 0,
        "tasks": [[p.task_index, bool(p.frozen)] for p in stack.projectors],
    }
    payload = b"".join(
        np.ascontiguousarray(p.weight, dtype="<f4").tobytes()
        + np.ascontiguousarray(p.bias, dtype="<f4").tobytes()
        for p in stack.projectors
    )
    head = json.dumps(meta, sort_keys=True).encode("utf-8")
    crc = zlib.crc32(head + payload)
    return _SNAP_MAGIC + struct.pack("<II", len(head), crc) + head + payload


def projector_payload(stack: ProjectorStack, task_index: int) -> bytes:
    """Raw serialized bytes of one projector (for identity comparisons)."""
    for p in stack.projectors:
        if p.task_index == task_index:
            return (np.ascontiguousarray(p.weight, dtype="<f4").tobytes()
                    + np.ascontiguousarray(p.bias, dtype="<f4").tobytes())
    raise ValueError(f"no projector for task {task_index}")


def restore(blob: bytes, expect_d: int | None = None) -> ProjectorStack:
    """Rebuild a stack from `snapshot` output; verifies CRC and dimension."""
    if len(blob) < len(_SNAP_MAGIC) + 8 or blob[:len(_SNAP_MAGIC)] != _SNAP_MAGIC:
        raise CheckpointError("magic mismatch in projector snapshot")
    off = len(_SNAP_MAGIC)
    head_len, crc = struct.unpack_from("<II", blob, off)
    off += 8
    body = blob[off:]
    if len(body) < head_len:
        raise CheckpointError("truncated projector snapshot")
    if zlib.crc32(body) != crc:
        raise CheckpointError("CRC mismatch in projector snapshot")
    meta = json.loads(body[:head_len].decode("utf-8"))
    d = int(meta["d"])
    if expect_d is not None and d != expect_d:
        raise CheckpointError(f"dimension mismatch: snapshot d={d}, expected {expect_d}")
    per = (d * d + d) * 4
    payload = body[head_len:]
    if len(payload) != per * len(meta["tasks"]):
        raise CheckpointError("payload length mismatch in projector snapshot")
    stack = ProjectorStack(branch=meta["branch"])
    for i, (task_index, frozen) in enumerate(meta["tasks"]):
        chunk = payload[i * per:(i + 1) * per]
        weight = np.frombuffer(chunk[: d * d * 4], dtype="<f4").reshape(d, d).copy()
        bias = np.frombuffer(chunk[d * d * 4:], dtype="<f4").copy()
        stack.projectors.append(Projector(weight=weight, bias=bias,
                                          task_index=int(task_index), frozen=bool(frozen)))
    return stack


def fresh_stacks(d: int) -> dict:
    """One empty stack per branch."""
    return {b: ProjectorStack(branch=b) for b in BRANCHES}


def apply_sgd_step(proj: Projector, grad_w: np.ndarray, grad_b: np.ndarray, lr: float) -> None:
    """In-place SGD update, rounded back to the float32 grid."""
    if proj.frozen:
        raise ValueError("SGD step on a frozen projector")
    w64 = proj.weight.astype(np.float64) - lr * grad_w
    b64 = proj.bias.astype(np.float64) - lr * grad_b
    proj.weight = w64.astype(np.float32)
    proj.bias = b64.astype(np.float32)
