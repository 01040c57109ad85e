# app/neighbor_cache.py - On-disk cache of precomputed neighborhoods
import hashlib
import logging
import os
import struct
import tempfile
from typing import Optional, Sequence

import numpy as np

from config import Config
from models.errors import GaotError
from models.spatial import MultiscaleNeighborhood, ScaleAdjacency, radius_query_all

logger = logging.getLogger(__name__)

NEIGHBOR_MAGIC = b"GAOTNB1\0"


def neighborhood_to_bytes(nbhd: MultiscaleNeighborhood) -> bytes:
    parts = [NEIGHBOR_MAGIC, struct.pack("<I", nbhd.n_scales)]
    for adj in nbhd.scales:
        parts.append(struct.pack("<QQ", adj.n_centers, adj.n_edges))
        parts.append(np.asarray(adj.offsets).astype("<u8").tobytes())
        parts.append(np.asarray(adj.neighbor_idx).astype("<u8").tobytes())
        parts.append(np.asarray(adj.rel_disp).astype("<f8").tobytes())
    return b"".join(parts)


def _read(blob: bytes, dtype: str, count: int, pos: int) -> np.ndarray:
    if count == 0:
        return np.zeros(0, dtype=dtype)
    if pos + 8 * count > len(blob):
        raise GaotError("neighborhood file is truncated")
    return np.frombuffer(blob, dtype=dtype, count=count, offset=pos)


def neighborhood_from_bytes(blob: bytes, radii: Sequence[float], dim: int) -> MultiscaleNeighborhood:
    """Inverse of :func:`neighborhood_to_bytes`; radii and dimension are not stored in the file"""
    if blob[:8] != NEIGHBOR_MAGIC:
        raise GaotError("not a GAOT neighborhood file (bad magic)")
    (n_scales,) = struct.unpack_from("<I", blob, 8)
    if n_scales != len(radii):
        raise GaotError(f"neighborhood file holds {n_scales} scales, caller expects {len(radii)}")
    pos = 12
    scales = []
    for _ in range(n_scales):
        n_centers, n_edges = struct.unpack_from("<QQ", blob, pos)
        pos += 16
        offsets = _read(blob, "<u8", n_centers + 1, pos).astype(np.int64)
        pos += 8 * (n_centers + 1)
        idx = _read(blob, "<u8", n_edges, pos).astype(np.int64)
        pos += 8 * n_edges
        disp = _read(blob, "<f8", n_edges * dim, pos).astype(np.float64).reshape(n_edges, dim)
        pos += 8 * n_edges * dim
        scales.append(ScaleAdjacency(offsets, idx, disp))
    if pos != len(blob):
        raise GaotError(f"neighborhood file has {len(blob) - pos} trailing bytes (wrong dimension?)")
    return MultiscaleNeighborhood(tuple(float(r) for r in radii), scales)


def neighborhood_key(centers: np.ndarray, sources: np.ndarray, radii: Sequence[float]) -> str:
    """Content hash of the query inputs"""
    digest = hashlib.sha256()
    for arr in (centers, sources):
        arr = np.ascontiguousarray(arr, dtype="<f8")
        digest.update(struct.pack("<QQ", *arr.shape))
        digest.update(arr.tobytes())
    digest.update(np.asarray(radii, dtype="<f8").tobytes())
    return digest.hexdigest()


class NeighborCache:
    """Builds neighborhoods once per (centers, sources, radii) and keeps them on disk"""

    def __init__(self, directory: Optional[str] = None):
        self.directory = directory or Config.cache_dir()
        self.hits = 0
        self.misses = 0

    def path(self, key: str) -> str:
        return os.path.join(self.directory, f"{key}.nbhd")

    def load(self, key: str, radii: Sequence[float], dim: int) -> Optional[MultiscaleNeighborhood]:
        path = self.path(key)
        if not os.path.exists(path):
            return None
        with open(path, "rb") as f:
            return neighborhood_from_bytes(f.read(), radii, dim)

    def store(self, key: str, nbhd: MultiscaleNeighborhood) -> str:
        """Write-temp-then-rename, so readers never see a partial file"""
        os.makedirs(self.directory, exist_ok=True)
        path = self.path(key)
        fd, tmp = tempfile.mkstemp(dir=self.directory, suffix=".tmp")
        try:
            with os.fdopen(fd, "wb") as f:
                f.write(neighborhood_to_bytes(nbhd))
            os.replace(tmp, path)
        except BaseException:
            if os.path.exists(tmp):
                os.remove(tmp)
            raise
        return path

    def radius_query(self, centers: np.ndarray, sources: np.ndarray, radii: Sequence[float]) -> MultiscaleNeighborhood:
        key = neighborhood_key(centers, sources, radii)
        dim = np.asarray(centers).shape[1]
        cached = self.load(key, radii, dim)
        if cached is not None:
            self.hits += 1
            return cached
        self.misses += 1
        nbhd = radius_query_all(centers, sources, radii)
        self.store(key, nbhd)
        logger.debug("neighborhood cached: %s", key[:12])
        return nbhd
