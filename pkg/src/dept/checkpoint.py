"""Binary checkpoint of a trained prompt and optional CAT head.

Layout, all little-endian: magic ``DEPTCK1\\0``; u32 ``l``, ``e``; ``l*e``
doubles of prompt context; u8 CAT flag; when set, u32 byte count followed by
the CAT block from :meth:`CatHeadParams.to_bytes`; u32 byte count followed by
a UTF-8 JSON document holding the training config and encoder checksum.
"""

from __future__ import annotations

import json
import struct

import numpy as np
import torch

from .data import _atomic_write
from .encoders import DTYPE, PromptContext
from .errors import CorruptCheckpointError
from .harness import TrainConfig, TrainedState
from .heads import CatHeadParams

CHECKPOINT_MAGIC = b"DEPTCK1\x00"
CHECKPOINT_NAME = "checkpoint.bin"


def state_to_bytes(state: TrainedState) -> bytes:
    prompt = state.prompt.vectors.detach().contiguous().numpy()
    l, e = prompt.shape
    parts = [CHECKPOINT_MAGIC, struct.pack("<II", l, e), prompt.astype("<f8").tobytes()]
    if state.cat_params is None:
        parts.append(b"\x00")
    else:
        blob = state.cat_params.to_bytes()
        parts += [b"\x01", struct.pack("<I", len(blob)), blob]
    meta = {"config": state.config.to_dict(),
            "encoder_checksum": state.metadata.get("encoder_checksum")}
    doc = json.dumps(meta, sort_keys=True).encode()
    parts += [struct.pack("<I", len(doc)), doc]
    return b"".join(parts)


class _Reader:
    def __init__(self, blob):
        self.blob, self.pos = blob, 0

    def take(self, n, field):
        if self.pos + n > len(self.blob):
            raise CorruptCheckpointError(field, f"truncated at offset {self.pos}: need {n} bytes")
        out = self.blob[self.pos:self.pos + n]
        self.pos += n
        return out


def state_from_bytes(blob: bytes) -> TrainedState:
    r = _Reader(blob)
    magic = r.take(8, "magic")
    if magic != CHECKPOINT_MAGIC:
        raise CorruptCheckpointError("magic", f"expected {CHECKPOINT_MAGIC!r}, found {magic!r}")
    l, e = struct.unpack("<II", r.take(8, "header"))
    prompt = np.frombuffer(r.take(8 * l * e, "prompt"), dtype="<f8").reshape(l, e)
    flag = r.take(1, "cat_flag")[0]
    cat = None
    if flag == 1:
        (n,) = struct.unpack("<I", r.take(4, "cat_params"))
        cat = CatHeadParams.from_bytes(r.take(n, "cat_params"))
    elif flag != 0:
        raise CorruptCheckpointError("cat_flag", f"unexpected value {flag}")
    (n,) = struct.unpack("<I", r.take(4, "metadata"))
    meta = json.loads(r.take(n, "metadata").decode())
    if r.pos != len(blob):
        raise CorruptCheckpointError("payload", f"{len(blob) - r.pos} trailing bytes")
    return TrainedState(
        prompt=PromptContext(torch.tensor(prompt, dtype=DTYPE), trainable=False),
        cat_params=cat,
        config=TrainConfig.from_dict(meta["config"]),
        loss_history=[],
        metadata={"encoder_checksum": meta.get("encoder_checksum")},
    )


def save_checkpoint(state: TrainedState, path) -> None:
    _atomic_write(path, state_to_bytes(state))


def load_checkpoint(path) -> TrainedState:
    with open(path, "rb") as fh:
        return state_from_bytes(fh.read())
