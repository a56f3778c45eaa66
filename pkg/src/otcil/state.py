"""Engine state and its checkpoint format.

A checkpoint is a single binary file:

    magic "OTCILCKPT" | u32 version | u32 header_len | u32 crc32(body)
    header JSON (utf-8) | float32 payloads, little endian

The header describes every payload (per stack, per projector, per class
statistic) with byte offsets and per-payload CRC32s; the trailing blob is
their concatenation.  Because learnable parameters and recorded
statistics live on the float32 grid, a save/load cycle reproduces the
live state bit-exactly, and a resumed run continues identically to an
uninterrupted one.
"""

import json
import os
import struct
import zlib
from dataclasses import dataclass, field

import numpy as np

from .config import TrainerConfig, trainer_from_dict
from .corpus import _atomic_write
from .projectors import CheckpointError, Projector, ProjectorStack, BRANCHES, fresh_stacks
from .replay import ClassStatistics

CKPT_MAGIC = b"OTCILCKPT"
CKPT_VERSION = 1


@dataclass
class EngineState:
    dim: int
    config: TrainerConfig
    stacks: dict = field(default_factory=dict)       # branch -> ProjectorStack
    class_stats: dict = field(default_factory=dict)  # class_id -> ClassStatistics
    attr_indices: dict = field(default_factory=dict) # class_id -> (N,) int array
    sessions: list = field(default_factory=list)     # class ids per trained session

    @property
    def num_sessions(self) -> int:
        return len(self.sessions)

    def class_order(self) -> list:
        return [cid for sess in self.sessions for cid in sess]

    def dense_index(self) -> dict:
        return {cid: i for i, cid in enumerate(self.class_order())}

    def classes_up_to(self, stage: int) -> list:
        return [cid for sess in self.sessions[:stage] for cid in sess]

    def origin_session(self) -> dict:
        return {cid: s for s, sess in enumerate(self.sessions, 1) for cid in sess}


def init_state(dim: int, config: TrainerConfig) -> EngineState:
    return EngineState(dim=dim, config=config, stacks=fresh_stacks(dim))


def save_state(state: EngineState, path: str, progress: dict | None = None) -> None:
    parent = os.path.dirname(path)
    if parent:
        os.makedirs(parent, exist_ok=True)
    header = {
        "version": CKPT_VERSION,
        "d": state.dim,
        "config": state.config.__dict__,
        "sessions": [[int(c) for c in sess] for sess in state.sessions],
        "attr_indices": {str(cid): [int(i) for i in idx]
                         for cid, idx in sorted(state.attr_indices.items())},
        "stacks": [],
        "stats": [],
    }
    if progress is not None:
        header["progress"] = progress
    payloads = []
    for branch in BRANCHES:
        stack = state.stacks[branch]
        entry = {"branch": branch, "projectors": []}
        for p in stack.projectors:
            blob = (np.ascontiguousarray(p.weight, dtype="<f4").tobytes()
                    + np.ascontiguousarray(p.bias, dtype="<f4").tobytes())
            entry["projectors"].append({
                "task_index": p.task_index,
                "frozen": bool(p.frozen),
                "bytes": len(blob),
                "crc32": zlib.crc32(blob),
            })
            payloads.append(blob)
        header["stacks"].append(entry)
    for cid in sorted(state.class_stats):
        st = state.class_stats[cid]
        blob = (np.ascontiguousarray(st.mean, dtype="<f4").tobytes()
                + np.ascontiguousarray(st.covariance, dtype="<f4").tobytes())
        header["stats"].append({
            "class_id": int(cid),
            "count": int(st.count),
            "bytes": len(blob),
            "crc32": zlib.crc32(blob),
        })
        payloads.append(blob)
    head = json.dumps(header, sort_keys=True).encode("utf-8")
    body = head + b"".join(payloads)
    data = CKPT_MAGIC + struct.pack("<III", CKPT_VERSION, len(head), zlib.crc32(body)) + body
    _atomic_write(path, data)


def load_state(path: str, expect_d: int | None = None) -> tuple:
    """Returns (EngineState, progress dict or None)."""
    if not os.path.isfile(path):
        raise CheckpointError(f"checkpoint not found: {path}")
    with open(path, "rb") as fh:
        data = fh.read()
    if len(data) < len(CKPT_MAGIC) + 12 or data[:len(CKPT_MAGIC)] != CKPT_MAGIC:
        raise CheckpointError("magic mismatch in checkpoint")
    version, head_len, crc = struct.unpack_from("<III", data, len(CKPT_MAGIC))
    if version != CKPT_VERSION:
        raise CheckpointError(f"version mismatch in checkpoint: {version}")
    body = data[len(CKPT_MAGIC) + 12:]
    if zlib.crc32(body) != crc:
        raise CheckpointError("CRC mismatch in checkpoint")
    header = json.loads(body[:head_len].decode("utf-8"))
    d = int(header["d"])
    if expect_d is not None and d != expect_d:
        raise CheckpointError(f"dimension mismatch: checkpoint d={d}, expected {expect_d}")
    state = EngineState(
        dim=d,
        config=trainer_from_dict(header["config"]),
        stacks={},
        class_stats={},
        attr_indices={int(k): np.asarray(v, dtype=np.int64)
                      for k, v in header["attr_indices"].items()},
        sessions=[list(map(int, sess)) for sess in header["sessions"]],
    )
    off = head_len
    payload = body
    for entry in header["stacks"]:
        stack = ProjectorStack(branch=entry["branch"])
        for pmeta in entry["projectors"]:
            blob = payload[off: off + pmeta["bytes"]]
            if len(blob) != pmeta["bytes"] or zlib.crc32(blob) != pmeta["crc32"]:
                raise CheckpointError(
                    f"CRC mismatch in projector payload ({entry['branch']} "
                    f"task {pmeta['task_index']})")
            w = np.frombuffer(blob[: d * d * 4], dtype="<f4").reshape(d, d).copy()
            b = np.frombuffer(blob[d * d * 4:], dtype="<f4").copy()
            stack.projectors.append(Projector(
                weight=w, bias=b,
                task_index=int(pmeta["task_index"]), frozen=bool(pmeta["frozen"])))
            off += pmeta["bytes"]
        state.stacks[entry["branch"]] = stack
    for smeta in header["stats"]:
        blob = payload[off: off + smeta["bytes"]]
        if len(blob) != smeta["bytes"] or zlib.crc32(blob) != smeta["crc32"]:
            raise CheckpointError(f"CRC mismatch in statistics payload "
                                  f"(class {smeta['class_id']})")
        mean = np.frombuffer(blob[: d * 4], dtype="<f4").astype(np.float64)
        cov = np.frombuffer(blob[d * 4:], dtype="<f4").reshape(d, d).astype(np.float64)
        state.class_stats[int(smeta["class_id"])] = ClassStatistics(
            class_id=int(smeta["class_id"]), mean=mean, covariance=cov,
            count=int(smeta["count"]))
        off += smeta["bytes"]
    if off != len(payload):
        raise CheckpointError("payload length mismatch in checkpoint")
    for branch in BRANCHES:
        if branch not in state.stacks:
            raise CheckpointError(f"checkpoint missing stack {branch}")
    return state, header.get("progress")
