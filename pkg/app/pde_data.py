# app/pde_data.py - Synthetic PDE datasets on point clouds
"""
Built-in dataset generators and the binary dataset file.

* ``poisson_gauss``: -Lap u = f on the unit square, f a superposition of
  Gaussian bumps, zero Dirichlet boundary.
* ``poisson_sines_disk``: -Lap u = f on the disk of radius 1/2 centred at
  (1/2, 1/2), f a truncated double-sine series.
* ``diffusion``: u_t = nu Lap u on the periodic unit square with random
  low-frequency initial data, evaluated exactly mode by mode.

Every generator solves (or evaluates) on a regular grid and samples the
fields at uniform random points; coordinates are finally mapped to [-1, 1]^2.
"""
import logging
import os
import struct
import tempfile
from dataclasses import dataclass, field
from typing import Callable, Optional, Sequence

import numpy as np
from joblib import Parallel, delayed
from scipy import sparse
from scipy.interpolate import RegularGridInterpolator
from scipy.sparse.linalg import cg
from sklearn.model_selection import train_test_split

from models.errors import GaotError, ShapeError, SolverError
from models.spatial import rescale_to_unit_box
from models.stepping import all2all_pairs

logger = logging.getLogger(__name__)

GRID_NODES = 128
CG_RTOL = 1e-10
THETA_MIN = 1e-3
DISK_CENTER = (0.5, 0.5)
DISK_RADIUS = 0.5

DATASET_MAGIC = b"GAOTDS1\0"
DATASET_VERSION = 1

__all__ = [
    "TrajectorySample", "DatasetFile", "all2all_pairs", "gen_poisson_gauss", "gen_poisson_sines_disk",
    "gen_diffusion", "generate_dataset", "GENERATORS",
]


@dataclass
class TrajectorySample:
    points: np.ndarray            # N x d
    input_fields: np.ndarray      # N x C_in
    snapshots: np.ndarray         # T x N x m
    times: np.ndarray             # T

    def __post_init__(self):
        self.points = np.ascontiguousarray(self.points, dtype=np.float64)
        self.input_fields = np.ascontiguousarray(self.input_fields, dtype=np.float64)
        self.snapshots = np.ascontiguousarray(self.snapshots, dtype=np.float64)
        self.times = np.ascontiguousarray(self.times, dtype=np.float64).reshape(-1)
        n = self.points.shape[0]
        if self.input_fields.shape[0] != n or self.snapshots.ndim != 3 or self.snapshots.shape[1] != n:
            raise ShapeError(f"TrajectorySample: {n} points, input {self.input_fields.shape}, "
                             f"snapshots {self.snapshots.shape}")
        if self.snapshots.shape[0] != self.times.shape[0]:
            raise ShapeError("TrajectorySample: one time stamp per snapshot required")
        for name in ("points", "input_fields", "snapshots", "times"):
            if not np.isfinite(getattr(self, name)).all():
                raise GaotError(f"TrajectorySample: non-finite {name}")

    @property
    def n_points(self) -> int:
        return self.points.shape[0]

    @property
    def n_times(self) -> int:
        return self.times.shape[0]


@dataclass
class DatasetFile:
    samples: list
    train: np.ndarray = field(default_factory=lambda: np.zeros(0, dtype=np.int64))
    val: np.ndarray = field(default_factory=lambda: np.zeros(0, dtype=np.int64))
    test: np.ndarray = field(default_factory=lambda: np.zeros(0, dtype=np.int64))

    def __post_init__(self):
        if not self.samples:
            raise GaotError("DatasetFile: no samples")
        first = self.samples[0]
        for s in self.samples:
            if (s.points.shape[1], s.input_fields.shape[1], s.snapshots.shape[2]) != \
                    (first.points.shape[1], first.input_fields.shape[1], first.snapshots.shape[2]):
                raise ShapeError("DatasetFile: samples disagree on d, C_in or m")
        self.train, self.val, self.test = (np.asarray(ix, dtype=np.int64) for ix in (self.train, self.val, self.test))
        merged = np.concatenate([self.train, self.val, self.test])
        if merged.size and (np.unique(merged).size != merged.size or merged.min() < 0
                            or merged.max() >= len(self.samples)):
            raise GaotError("DatasetFile: split indices must be disjoint and in range")

    @property
    def coord_dim(self) -> int:
        return self.samples[0].points.shape[1]

    @property
    def in_channels(self) -> int:
        return self.samples[0].input_fields.shape[1]

    @property
    def out_channels(self) -> int:
        return self.samples[0].snapshots.shape[2]

    @property
    def time_dependent(self) -> bool:
        return any(s.n_times > 1 for s in self.samples)

    def split_indices(self, name: str) -> np.ndarray:
        if name not in ("train", "val", "test"):
            raise GaotError(f"unknown split '{name}', expected train, val or test")
        return getattr(self, name)

    def split(self, name: str) -> list:
        return [self.samples[i] for i in self.split_indices(name)]

    # -- binary layout ------------------------------------------------------

    def to_bytes(self) -> bytes:
        parts = [DATASET_MAGIC, struct.pack("<IIIIQ", DATASET_VERSION, self.coord_dim, self.in_channels,
                                            self.out_channels, len(self.samples))]
        for s in self.samples:
            parts.append(struct.pack("<QQ", s.n_points, s.n_times))
            for arr in (s.points, s.input_fields, s.times, s.snapshots):
                parts.append(arr.astype("<f8").tobytes())
        for ix in (self.train, self.val, self.test):
            parts.append(struct.pack("<Q", ix.size))
            parts.append(ix.astype("<u8").tobytes())
        return b"".join(parts)

    @classmethod
    def from_bytes(cls, blob: bytes) -> "DatasetFile":
        if blob[:8] != DATASET_MAGIC:
            raise GaotError("not a GAOT dataset file (bad magic)")
        pos = 8

        def take(fmt):
            nonlocal pos
            if pos + struct.calcsize(fmt) > len(blob):
                raise GaotError("dataset file is truncated")
            values = struct.unpack_from(fmt, blob, pos)
            pos += struct.calcsize(fmt)
            return values

        def array(dtype, count, shape):
            nonlocal pos
            if pos + 8 * count > len(blob):
                raise GaotError("dataset file is truncated")
            out = np.frombuffer(blob, dtype=dtype, count=count, offset=pos) if count else np.zeros(0, dtype)
            out = out.reshape(shape)
            pos += count * 8
            return out.astype(np.float64 if dtype == "<f8" else np.int64)

        version, d, c_in, m, n_samples = take("<IIIIQ")
        if version != DATASET_VERSION:
            raise GaotError(f"unsupported dataset version {version}")
        samples = []
        for _ in range(n_samples):
            n, t = take("<QQ")
            points = array("<f8", n * d, (n, d))
            inputs = array("<f8", n * c_in, (n, c_in))
            times = array("<f8", t, (t,))
            snaps = array("<f8", t * n * m, (t, n, m))
            samples.append(TrajectorySample(points, inputs, snaps, times))
        splits = []
        for _ in range(3):
            (count,) = take("<Q")
            splits.append(array("<u8", count, (count,)))
        return cls(samples, *splits)

    def write(self, path: str) -> None:
        """Atomic write (temp file in the target directory, then rename)"""
        directory = os.path.dirname(os.path.abspath(path))
        os.makedirs(directory, exist_ok=True)
        fd, tmp = tempfile.mkstemp(dir=directory, suffix=".tmp")
        try:
            with os.fdopen(fd, "wb") as f:
                f.write(self.to_bytes())
            os.replace(tmp, path)
        except BaseException:
            if os.path.exists(tmp):
                os.remove(tmp)
            raise
        logger.info("💾 Dataset written: %s (%d samples)", path, len(self.samples))

    @classmethod
    def read(cls, path: str) -> "DatasetFile":
        with open(path, "rb") as f:
            return cls.from_bytes(f.read())


def make_splits(n_samples: int, n_val: int, n_test: int, seed: int):
    """Sorted, disjoint train/val/test index lists covering every sample"""
    if n_val < 0 or n_test < 0 or n_val + n_test >= n_samples:
        raise GaotError(f"cannot carve {n_val} val + {n_test} test samples out of {n_samples}")
    rest = np.arange(n_samples)
    test = np.zeros(0, dtype=np.int64)
    val = np.zeros(0, dtype=np.int64)
    if n_test:
        rest, test = train_test_split(rest, test_size=n_test, random_state=seed % (2 ** 32))
    if n_val:
        rest, val = train_test_split(rest, test_size=n_val, random_state=(seed + 1) % (2 ** 32))
    return np.sort(rest), np.sort(val), np.sort(test)


# ---------------------------------------------------------------------------
# Finite-difference Poisson solvers
# ---------------------------------------------------------------------------

def grid_axis(n: int = GRID_NODES) -> np.ndarray:
    return np.linspace(0.0, 1.0, n)


def dirichlet_laplacian(n: int = GRID_NODES) -> sparse.csr_matrix:
    """5-point -Lap on the (n-2)^2 interior nodes of the unit square"""
    m = n - 2
    h = 1.0 / (n - 1)
    e = np.ones(m)
    t = sparse.diags([-e[1:], 2.0 * e, -e[1:]], [-1, 0, 1])
    eye = sparse.identity(m)
    return ((sparse.kron(eye, t) + sparse.kron(t, eye)) / h ** 2).tocsr()


def _solve_spd(a: sparse.csr_matrix, b: np.ndarray, what: str) -> np.ndarray:
    if not np.any(b):
        return np.zeros_like(b)
    x, info = cg(a, b, rtol=CG_RTOL, atol=0.0, maxiter=20 * b.size)
    if info != 0:
        residual = np.linalg.norm(b - a @ x) / np.linalg.norm(b)
        raise SolverError(f"{what}: CG did not converge (info={info}, relative residual {residual:.3e})")
    return x


def solve_poisson_square(f_grid: np.ndarray) -> np.ndarray:
    """u on all n x n nodes of [0,1]^2 for -Lap u = f, u = 0 on the boundary"""
    n = f_grid.shape[0]
    u = np.zeros((n, n))
    rhs = np.ascontiguousarray(f_grid[1:-1, 1:-1]).reshape(-1)
    u[1:-1, 1:-1] = _solve_spd(dirichlet_laplacian(n), rhs, "poisson square").reshape(n - 2, n - 2)
    return u


def disk_laplacian(n: int = GRID_NODES, center=DISK_CENTER, radius: float = DISK_RADIUS):
    """-Lap on the grid nodes strictly inside a disk, with the symmetric cut-cell rule.

    A neighbor outside the disk is replaced by the boundary value 0 at the
    crossing point theta * h away; its coupling moves to the diagonal as
    1 / (theta h^2), which keeps the matrix symmetric positive definite.
    Returns the CSR matrix and the boolean node mask.
    """
    h = 1.0 / (n - 1)
    ax = grid_axis(n)
    x, y = np.meshgrid(ax, ax, indexing="ij")
    vx, vy = x - center[0], y - center[1]
    inside = vx ** 2 + vy ** 2 < radius ** 2
    index = np.full((n, n), -1, dtype=np.int64)
    count = int(inside.sum())
    index[inside] = np.arange(count)
    ii, jj = np.nonzero(inside)
    me = index[ii, jj]

    rows, cols, vals = [], [], []
    diag = np.zeros(count)
    for di, dj in ((1, 0), (-1, 0), (0, 1), (0, -1)):
        ni, nj = ii + di, jj + dj
        nb_in = inside[ni, nj]
        rows.append(me[nb_in])
        cols.append(index[ni[nb_in], nj[nb_in]])
        vals.append(np.full(int(nb_in.sum()), -1.0 / h ** 2))
        diag[nb_in] += 1.0 / h ** 2

        out = ~nb_in
        px, py = vx[ii[out], jj[out]], vy[ii[out], jj[out]]
        proj = px * di + py * dj
        s = -proj + np.sqrt(np.maximum(proj ** 2 - (px ** 2 + py ** 2) + radius ** 2, 0.0))
        theta = np.clip(s / h, THETA_MIN, 1.0)
        diag[out] += 1.0 / (theta * h ** 2)

    rows.append(np.arange(count))
    cols.append(np.arange(count))
    vals.append(diag)
    a = sparse.coo_matrix((np.concatenate(vals), (np.concatenate(rows), np.concatenate(cols))),
                          shape=(count, count))
    return a.tocsr(), inside


def solve_poisson_disk(f_grid: np.ndarray, center=DISK_CENTER, radius: float = DISK_RADIUS) -> np.ndarray:
    """u on the n x n grid (zero outside the disk) for -Lap u = f, u = 0 on the circle"""
    n = f_grid.shape[0]
    a, inside = disk_laplacian(n, center, radius)
    u = np.zeros((n, n))
    u[inside] = _solve_spd(a, f_grid[inside], "poisson disk")
    return u


def sample_grid(values: np.ndarray, points: np.ndarray) -> np.ndarray:
    """Bilinear interpolation of node values on [0,1]^2 at points (N x 2)"""
    ax = grid_axis(values.shape[0])
    interp = RegularGridInterpolator((ax, ax), values, method="linear")
    return interp(np.clip(points, 0.0, 1.0))


# ---------------------------------------------------------------------------
# Sources and exact diffusion fields
# ---------------------------------------------------------------------------

@dataclass
class GaussianBumps:
    centers: np.ndarray           # k x 2
    widths: np.ndarray            # k
    amplitudes: np.ndarray        # k

    @classmethod
    def draw(cls, rng: np.random.Generator, max_bumps: int = 4) -> "GaussianBumps":
        k = int(rng.integers(1, max_bumps + 1))
        return cls(rng.uniform(0.15, 0.85, size=(k, 2)), rng.uniform(0.05, 0.15, size=k),
                   rng.uniform(-1.0, 1.0, size=k) * 100.0)

    def __call__(self, x: np.ndarray, y: np.ndarray) -> np.ndarray:
        out = np.zeros(np.broadcast(x, y).shape)
        for (cx, cy), w, a in zip(self.centers, self.widths, self.amplitudes):
            out += a * np.exp(-((x - cx) ** 2 + (y - cy) ** 2) / (2.0 * w ** 2))
        return out


@dataclass
class SineSeries:
    coefficients: np.ndarray      # K x K, a_ij
    r_exp: float = -0.5

    def __call__(self, x: np.ndarray, y: np.ndarray) -> np.ndarray:
        """(pi/K^2) sum_ij a_ij (i^2 + j^2)^(-r) sin(pi i x) sin(pi j y)"""
        k = self.coefficients.shape[0]
        modes = np.arange(1, k + 1)
        weights = self.coefficients * (modes[:, None] ** 2 + modes[None, :] ** 2) ** (-self.r_exp)
        shape = np.broadcast(x, y).shape
        sx = np.sin(np.pi * np.multiply.outer(np.broadcast_to(x, shape).reshape(-1), modes))
        sy = np.sin(np.pi * np.multiply.outer(np.broadcast_to(y, shape).reshape(-1), modes))
        return (np.pi / k ** 2 * np.einsum("pi,ij,pj->p", sx, weights, sy)).reshape(shape)


@dataclass
class FourierModes:
    wavenumbers: np.ndarray       # k x 2 integers
    cos_coef: np.ndarray          # k
    sin_coef: np.ndarray          # k

    @classmethod
    def draw(cls, rng: np.random.Generator, max_wavenumber: int = 2) -> "FourierModes":
        ks = np.array([(a, b) for a in range(0, max_wavenumber + 1)
                       for b in range(-max_wavenumber, max_wavenumber + 1)
                       if (a, b) > (0, 0)], dtype=np.int64)
        return cls(ks, rng.uniform(-1.0, 1.0, size=len(ks)), rng.uniform(-1.0, 1.0, size=len(ks)))

    def decay_rates(self, nu: float) -> np.ndarray:
        return nu * (2.0 * np.pi) ** 2 * np.sum(self.wavenumbers ** 2, axis=1)

    def evaluate(self, nu: float, times: np.ndarray, points: np.ndarray) -> np.ndarray:
        """Exact heat-equation solution, T x N, on the periodic unit square"""
        phase = 2.0 * np.pi * points @ self.wavenumbers.T.astype(np.float64)
        damp = np.exp(-np.outer(times, self.decay_rates(nu)))
        return (damp * self.cos_coef) @ np.cos(phase).T + (damp * self.sin_coef) @ np.sin(phase).T

    def energy(self, nu: float, times: np.ndarray) -> np.ndarray:
        """Mean of u^2 over the periodic square at each time"""
        damp = np.exp(-2.0 * np.outer(times, self.decay_rates(nu)))
        return 0.5 * damp @ (self.cos_coef ** 2 + self.sin_coef ** 2)


# ---------------------------------------------------------------------------
# Generators
# ---------------------------------------------------------------------------

def _uniform_disk(rng: np.random.Generator, n: int, center=DISK_CENTER, radius: float = DISK_RADIUS):
    r = radius * np.sqrt(rng.random(n))
    phi = 2.0 * np.pi * rng.random(n)
    return np.stack([center[0] + r * np.cos(phi), center[1] + r * np.sin(phi)], axis=1)


def _poisson_gauss_sample(points_per_sample: int, seed: int) -> TrajectorySample:
    rng = np.random.default_rng(seed)
    source = GaussianBumps.draw(rng)
    pts = rng.uniform(0.0, 1.0, size=(points_per_sample, 2))
    ax = grid_axis()
    x, y = np.meshgrid(ax, ax, indexing="ij")
    f_grid = source(x, y)
    u_grid = solve_poisson_square(f_grid)
    coords = rescale_to_unit_box(pts, (0.0, 0.0), (1.0, 1.0))
    return TrajectorySample(coords, sample_grid(f_grid, pts)[:, None], sample_grid(u_grid, pts)[None, :, None],
                            np.zeros(1))


def _poisson_sines_sample(points_per_sample: int, k: int, r_exp: float, seed: int) -> TrajectorySample:
    rng = np.random.default_rng(seed)
    source = SineSeries(rng.uniform(-1.0, 1.0, size=(k, k)), r_exp)
    pts = _uniform_disk(rng, points_per_sample)
    ax = grid_axis()
    x, y = np.meshgrid(ax, ax, indexing="ij")
    u_grid = solve_poisson_disk(source(x, y))
    coords = rescale_to_unit_box(pts, (0.0, 0.0), (1.0, 1.0))
    return TrajectorySample(coords, source(pts[:, 0], pts[:, 1])[:, None],
                            sample_grid(u_grid, pts)[None, :, None], np.zeros(1))


def _diffusion_sample(points_per_sample: int, snapshots: int, seed: int) -> TrajectorySample:
    rng = np.random.default_rng(seed)
    nu = float(rng.uniform(0.01, 0.05))
    modes = FourierModes.draw(rng)
    pts = rng.uniform(0.0, 1.0, size=(points_per_sample, 2))
    times = np.linspace(0.0, 1.0, snapshots)
    u = modes.evaluate(nu, times, pts)
    coords = rescale_to_unit_box(pts, (0.0, 0.0), (1.0, 1.0))
    return TrajectorySample(coords, np.full((points_per_sample, 1), nu), u[:, :, None], times)


def _run(sample_fn: Callable[[int], TrajectorySample], n_samples: int, rng_seed: int, n_jobs: int) -> list:
    """Per-sample seeds are rng_seed XOR index; results come back in index order"""
    return Parallel(n_jobs=n_jobs)(delayed(sample_fn)(rng_seed ^ i) for i in range(n_samples))


def gen_poisson_gauss(n_samples: int, points_per_sample: int, rng_seed: int, n_jobs: int = 1) -> list:
    if points_per_sample < 64:
        raise GaotError(f"poisson_gauss needs at least 64 points per sample, got {points_per_sample}")
    return _run(lambda s: _poisson_gauss_sample(points_per_sample, s), n_samples, rng_seed, n_jobs)


def gen_poisson_sines_disk(n_samples: int, points_per_sample: int, k: int = 8, r_exp: float = -0.5,
                           rng_seed: int = 0, n_jobs: int = 1) -> list:
    if k < 1:
        raise GaotError(f"poisson_sines_disk needs K >= 1, got {k}")
    return _run(lambda s: _poisson_sines_sample(points_per_sample, k, r_exp, s), n_samples, rng_seed, n_jobs)


def gen_diffusion(n_samples: int, points_per_sample: int, snapshots: int = 8, rng_seed: int = 0,
                  n_jobs: int = 1) -> list:
    if snapshots < 3:
        raise GaotError(f"diffusion needs at least 3 snapshots, got {snapshots}")
    return _run(lambda s: _diffusion_sample(points_per_sample, snapshots, s), n_samples, rng_seed, n_jobs)


GENERATORS = ("poisson_gauss", "poisson_sines_disk", "diffusion")


def generate_dataset(generator: str, n_samples: int, points: int, seed: int, n_val: int = 0,
                     n_test: int = 0, n_jobs: int = 1, sines_k: int = 8, sines_r: float = -0.5,
                     snapshots: int = 8, split_seed: Optional[int] = None) -> DatasetFile:
    logger.info("🔄 Generating %s: %d samples x %d points", generator, n_samples, points)
    if generator == "poisson_gauss":
        samples = gen_poisson_gauss(n_samples, points, seed, n_jobs)
    elif generator == "poisson_sines_disk":
        samples = gen_poisson_sines_disk(n_samples, points, sines_k, sines_r, seed, n_jobs)
    elif generator == "diffusion":
        samples = gen_diffusion(n_samples, points, snapshots, seed, n_jobs)
    else:
        raise GaotError(f"unknown generator '{generator}', expected one of {GENERATORS}")
    train, val, test = make_splits(n_samples, n_val, n_test, seed if split_seed is None else split_seed)
    return DatasetFile(samples, train, val, test)


def subsample_points(samples: Sequence[TrajectorySample], count: int, seed: int) -> list:
    """Random point subsets of each sample (fewer query points for resolution sweeps)"""
    out = []
    for i, s in enumerate(samples):
        if count > s.n_points:
            raise GaotError(f"cannot subsample {count} of {s.n_points} points")
        keep = np.sort(np.random.default_rng(seed ^ i).choice(s.n_points, size=count, replace=False))
        out.append(TrajectorySample(s.points[keep], s.input_fields[keep], s.snapshots[:, keep], s.times))
    return out
