"""Synthetic Darcy-flow point clouds, normalization, and the PCF dataset format.

Each sample is a two-phase coefficient field ``a`` on a g x g node grid of the
unit square and the solution of -div(a grad u) = 1 with u = 0 on the
boundary, discretized by the 5-point stencil with harmonic-mean face
coefficients and solved by conjugate gradients.
"""

import json
import struct
from dataclasses import dataclass
from pathlib import Path

import numpy as np
from scipy.ndimage import uniform_filter1d

from .errors import (ConfigError, ConvergenceError, InvalidValueError, MagicError,
                     TruncationError, VersionError)

PHASES = (3.0, 12.0)
MIN_GRID = 8
GEN_TOL = 1e-10

PCF_MAGIC = b"PCF1"
PCF_VERSION = 1


@dataclass
class Sample:
    coords: np.ndarray     # (N, d_pos)
    features: np.ndarray   # (N, d_in)
    labels: np.ndarray     # (N, d_out)

    @property
    def n_points(self):
        return self.coords.shape[0]


@dataclass
class NormStats:
    feature_mean: np.ndarray
    feature_std: np.ndarray
    label_mean: np.ndarray
    label_std: np.ndarray

    def to_dict(self):
        return {k: np.asarray(v, dtype=np.float64).tolist() for k, v in self.__dict__.items()}

    @classmethod
    def from_dict(cls, d):
        return cls(**{k: np.asarray(d[k], dtype=np.float64) for k in
                      ("feature_mean", "feature_std", "label_mean", "label_std")})


# ----------------------------------------------------------------------------
# conjugate gradients
# ----------------------------------------------------------------------------

def cg_solve(apply_a, b, tol=1e-10, max_iters=10_000, x0=None, callback=None):
    """Solve A x = b for symmetric positive definite A given as a matvec.

    Terminates once the true relative residual ||A x - b|| / ||b|| <= tol.
    ``callback(k, x, rel_res)`` is invoked after every iteration.
    """
    b = np.asarray(b, dtype=np.float64)
    bnorm = np.linalg.norm(b)
    x = np.zeros_like(b) if x0 is None else np.array(x0, dtype=np.float64)
    if bnorm == 0.0:
        return np.zeros_like(b)
    r = b - apply_a(x)
    p = r.copy()
    rs = r @ r
    for k in range(1, max_iters + 1):
        ap = apply_a(p)
        pap = p @ ap
        if pap <= 0:
            raise ConvergenceError("cg_solve: operator is not positive definite",
                                   residual=np.sqrt(rs) / bnorm)
        alpha = rs / pap
        x += alpha * p
        r -= alpha * ap
        rs_new = r @ r
        rel = np.sqrt(rs_new) / bnorm
        if rel <= tol:
            # recurrence residual can drift; confirm against the true one
            r = b - apply_a(x)
            rs_new = r @ r
            rel = np.sqrt(rs_new) / bnorm
            if callback is not None:
                callback(k, x, rel)
            if rel <= tol:
                return x
            p = r.copy()
            rs = rs_new
            continue
        if callback is not None:
            callback(k, x, rel)
        p = r + (rs_new / rs) * p
        rs = rs_new
    raise ConvergenceError(
        f"cg_solve: no convergence in {max_iters} iterations (relative residual {rel:.3e})",
        residual=rel)


# ----------------------------------------------------------------------------
# Darcy generator
# ----------------------------------------------------------------------------

def coefficient_field(g, rng):
    """Box-blurred uniform noise split at its median into the two phases."""
    noise = rng.uniform(size=(g, g))
    width = 2 * max(1, g // 8) + 1
    smooth = uniform_filter1d(uniform_filter1d(noise, width, axis=0, mode="reflect"),
                              width, axis=1, mode="reflect")
    return np.where(smooth >= np.median(smooth), PHASES[1], PHASES[0])


def darcy_operator(a):
    """Matvec for -div(a grad u) on interior nodes of a square grid, u = 0 outside."""
    a = np.asarray(a, dtype=np.float64)
    g = a.shape[0]
    h2 = (1.0 / (g - 1)) ** 2
    ax = 2.0 * a[1:, :] * a[:-1, :] / (a[1:, :] + a[:-1, :])   # faces (i+1/2, j)
    ay = 2.0 * a[:, 1:] * a[:, :-1] / (a[:, 1:] + a[:, :-1])   # faces (i, j+1/2)
    full = np.zeros((g, g))

    def apply(u):
        full[1:-1, 1:-1] = u.reshape(g - 2, g - 2)
        fx = ax * (full[1:, :] - full[:-1, :])
        fy = ay * (full[:, 1:] - full[:, :-1])
        out = -(fx[1:, 1:-1] - fx[:-1, 1:-1]) - (fy[1:-1, 1:] - fy[1:-1, :-1])
        return out.reshape(-1) / h2

    return apply


def solve_darcy(a, tol=GEN_TOL, max_iters=20_000):
    """Full g x g solution (zero boundary) for unit source."""
    g = a.shape[0]
    b = np.ones((g - 2) ** 2)
    u_int = cg_solve(darcy_operator(a), b, tol=tol, max_iters=max_iters)
    u = np.zeros((g, g))
    u[1:-1, 1:-1] = u_int.reshape(g - 2, g - 2)
    return u


def generate_darcy_sample(grid_size, seed):
    g = int(grid_size)
    if g < MIN_GRID:
        raise ConfigError(f"grid size must be >= {MIN_GRID}, got {g}")
    rng = np.random.default_rng(seed)
    a = coefficient_field(g, rng)
    u = solve_darcy(a)
    ticks = np.linspace(0.0, 1.0, g)
    xx, yy = np.meshgrid(ticks, ticks, indexing="ij")
    coords = np.stack([xx.ravel(), yy.ravel()], axis=1)
    features = np.concatenate([coords, a.reshape(-1, 1)], axis=1)
    return Sample(coords=coords, features=features, labels=u.reshape(-1, 1))


def sample_seeds(seed, count):
    return [int(s) for s in np.random.SeedSequence(seed).generate_state(count)]


def generate_split(grid_size, n_train, n_test, seed):
    """Train/test sample lists plus the seed manifest used to make them."""
    seeds = sample_seeds(seed, n_train + n_test)
    train = [generate_darcy_sample(grid_size, s) for s in seeds[:n_train]]
    test = [generate_darcy_sample(grid_size, s) for s in seeds[n_train:]]
    manifest = {"train": seeds[:n_train], "test": seeds[n_train:]}
    return train, test, manifest


# ----------------------------------------------------------------------------
# normalization
# ----------------------------------------------------------------------------

def _safe_std(x):
    std = x.std(axis=0)
    return np.where(std > 0, std, 1.0)


def compute_stats(samples):
    if not samples:
        raise InvalidValueError("cannot compute normalization stats of an empty split")
    f = np.concatenate([s.features for s in samples]).astype(np.float64)
    y = np.concatenate([s.labels for s in samples]).astype(np.float64)
    return NormStats(f.mean(axis=0), _safe_std(f), y.mean(axis=0), _safe_std(y))


def normalize(samples, stats=None):
    """Z-score features and labels. Stats are computed from ``samples`` when not given."""
    if stats is None:
        stats = compute_stats(samples)
    out = []
    for s in samples:
        out.append(Sample(
            coords=s.coords,
            features=(s.features - stats.feature_mean) / stats.feature_std,
            labels=(s.labels - stats.label_mean) / stats.label_std,
        ))
    return out, stats


def denormalize(samples, stats):
    return [Sample(coords=s.coords,
                   features=s.features * stats.feature_std + stats.feature_mean,
                   labels=s.labels * stats.label_std + stats.label_mean)
            for s in samples]


# ----------------------------------------------------------------------------
# PCF files
# ----------------------------------------------------------------------------

_HEADER = struct.Struct("<4sIQ")
_SAMPLE = struct.Struct("<QIII")


def write_pcf(path, samples):
    with open(path, "wb") as fh:
        fh.write(_HEADER.pack(PCF_MAGIC, PCF_VERSION, len(samples)))
        for s in samples:
            n = s.coords.shape[0]
            if s.features.shape[0] != n or s.labels.shape[0] != n:
                raise InvalidValueError("sample arrays disagree on point count")
            fh.write(_SAMPLE.pack(n, s.coords.shape[1], s.features.shape[1], s.labels.shape[1]))
            for arr in (s.coords, s.features, s.labels):
                fh.write(np.ascontiguousarray(arr, dtype="<f4").tobytes())


def read_pcf(path):
    buf = Path(path).read_bytes()
    if len(buf) < 4 or buf[:4] != PCF_MAGIC:
        raise MagicError(f"{path}: not a PCF file (bad magic {buf[:4]!r})")
    if len(buf) < _HEADER.size:
        raise TruncationError(f"{path}: truncated header")
    _, version, n_samples = _HEADER.unpack_from(buf, 0)
    if version != PCF_VERSION:
        raise VersionError(f"{path}: unsupported PCF version {version}")
    off = _HEADER.size
    samples = []
    for i in range(n_samples):
        if off + _SAMPLE.size > len(buf):
            raise TruncationError(f"{path}: truncated at sample index {i} of {n_samples}")
        n, d_pos, d_in, d_out = _SAMPLE.unpack_from(buf, off)
        off += _SAMPLE.size
        arrays = []
        for width in (d_pos, d_in, d_out):
            nbytes = 4 * n * width
            if off + nbytes > len(buf):
                raise TruncationError(f"{path}: truncated at sample index {i} of {n_samples}")
            arrays.append(np.frombuffer(buf, dtype="<f4", count=n * width, offset=off)
                          .reshape(n, width).astype(np.float32))
            off += nbytes
        samples.append(Sample(*arrays))
    return samples


def write_meta(path, stats, generator, manifest):
    meta = {"norm_stats": stats.to_dict(), "generator": generator, "split": manifest}
    Path(path).write_text(json.dumps(meta, indent=2, sort_keys=True) + "\n")


def read_meta(path):
    meta = json.loads(Path(path).read_text())
    meta["norm_stats"] = NormStats.from_dict(meta["norm_stats"])
    return meta
