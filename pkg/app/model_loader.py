# app/model_loader.py - Checkpoint save / load
import logging
import os
import struct
import tempfile

import numpy as np
import torch

from config import emit_model, parse_model
from models.autodiff import DTYPE
from models.errors import GaotError
from models.gaot_net import GAOT

logger = logging.getLogger(__name__)

CHECKPOINT_MAGIC = b"GAOTCK1\0"


def build_model(config, seed: int) -> GAOT:
    """Fresh model with weights drawn from ``seed``"""
    with torch.random.fork_rng(devices=[]):
        torch.manual_seed(seed)
        return GAOT(config)


def checkpoint_bytes(model: GAOT, profile: str = "desk") -> bytes:
    """magic, config text, then every parameter and buffer as a named real64 tensor"""
    text = emit_model(model.config, profile).encode("utf-8")
    state = model.state_dict()
    parts = [CHECKPOINT_MAGIC, struct.pack("<Q", len(text)), text, struct.pack("<I", len(state))]
    for name, tensor in state.items():
        raw = name.encode("utf-8")
        values = tensor.detach().to(DTYPE).cpu().numpy()
        parts.append(struct.pack("<I", len(raw)))
        parts.append(raw)
        parts.append(struct.pack("<I", values.ndim))
        parts.append(struct.pack(f"<{values.ndim}Q", *values.shape))
        parts.append(np.ascontiguousarray(values, dtype="<f8").tobytes())
    return b"".join(parts)


def model_from_bytes(blob: bytes) -> tuple:
    """(model, profile) rebuilt from :func:`checkpoint_bytes` output"""
    if blob[:8] != CHECKPOINT_MAGIC:
        raise GaotError("not a GAOT checkpoint (bad magic)")
    try:
        config, profile, state = _parse_checkpoint(blob)
    except struct.error:
        raise GaotError("checkpoint is truncated") from None

    model = GAOT(config)
    missing, unexpected = model.load_state_dict(state, strict=False)
    if missing or unexpected:
        raise GaotError(f"checkpoint does not match its config: missing {missing}, unexpected {unexpected}")
    model.eval()
    return model, profile


def _parse_checkpoint(blob: bytes) -> tuple:
    pos = 8
    (text_len,) = struct.unpack_from("<Q", blob, pos)
    pos += 8
    config, profile = parse_model(blob[pos:pos + text_len].decode("utf-8"))
    pos += text_len
    (count,) = struct.unpack_from("<I", blob, pos)
    pos += 4
    state = {}
    for _ in range(count):
        (name_len,) = struct.unpack_from("<I", blob, pos)
        pos += 4
        name = blob[pos:pos + name_len].decode("utf-8")
        pos += name_len
        (rank,) = struct.unpack_from("<I", blob, pos)
        pos += 4
        shape = struct.unpack_from(f"<{rank}Q", blob, pos)
        pos += 8 * rank
        n = int(np.prod(shape)) if rank else 1
        if pos + 8 * n > len(blob):
            raise GaotError(f"checkpoint truncated inside tensor '{name}'")
        values = np.frombuffer(blob, dtype="<f8", count=n, offset=pos).reshape(shape) if n else np.zeros(shape)
        pos += 8 * n
        state[name] = torch.tensor(values, dtype=DTYPE)
    return config, profile, state


def save_checkpoint(model: GAOT, path: str, profile: str = "desk") -> str:
    directory = os.path.dirname(os.path.abspath(path))
    os.makedirs(directory, exist_ok=True)
    fd, tmp = tempfile.mkstemp(dir=directory, suffix=".tmp")
    try:
        with os.fdopen(fd, "wb") as f:
            f.write(checkpoint_bytes(model, profile))
        os.replace(tmp, path)
    except BaseException:
        if os.path.exists(tmp):
            os.remove(tmp)
        raise
    logger.debug("checkpoint saved: %s", path)
    return path


def load_checkpoint(path: str) -> GAOT:
    with open(path, "rb") as f:
        model, _ = model_from_bytes(f.read())
    logger.info("✅ Model loaded from %s", path)
    return model
