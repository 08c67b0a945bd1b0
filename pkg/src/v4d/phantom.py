"""Synthetic volumetric data: spline trajectories, cube-marker rendering,
sequence datasets.

A trajectory is a natural cubic spline through 60-90 random knot positions
inside the margin-inset field of view, sampled at equidistant parameter
values (which are not equidistant in space). Each sampled position is
rendered as a partial-volume cube marker with multiplicative speckle noise;
sliding windows of T consecutive volumes form the regression samples, with
the last frame's position as the target.

Dataset directory layout: ``manifest.json`` plus one binary file per split
holding a u64 count followed by (sequence tensor record, target tensor
record) pairs in the ``V4DT`` format.
"""

from __future__ import annotations

import json
import struct
from dataclasses import dataclass, field, asdict
from pathlib import Path

import numpy as np

from .tensor import read_tensor, write_tensor

DATASET_FORMAT_VERSION = 1
SPLIT_NAMES = ("train", "val", "test")


class PhantomError(ValueError):
    pass


@dataclass
class TrajectoryConfig:
    knots_min: int = 60
    knots_max: int = 90
    samples_per_spline: int = 500
    fov_mm: tuple[float, float, float] = (3.0, 3.0, 3.5)
    margin_mm: float = 0.5
    seed: int = 0

    def __post_init__(self):
        if self.knots_min < 2 or self.knots_min > self.knots_max:
            raise PhantomError("need 2 <= knots_min <= knots_max")
        if self.samples_per_spline < 2:
            raise PhantomError("samples_per_spline must be >= 2")
        if self.margin_mm >= min(self.fov_mm) / 2:
            raise PhantomError("margin must be < half the smallest FOV axis")


@dataclass
class PhantomConfig:
    extents: tuple[int, int, int] = (32, 32, 32)
    marker_edge_mm: float = 1.0
    marker_intensity: float = 1.0
    background: float = 0.05
    speckle_std: float = 0.05
    fov_mm: tuple[float, float, float] = (3.0, 3.0, 3.5)
    seed: int = 0

    def __post_init__(self):
        if any(e < 2 for e in self.extents):
            raise PhantomError("volume extents must be >= 2")
        if self.marker_edge_mm <= 0 or self.marker_edge_mm > min(self.fov_mm):
            raise PhantomError("marker must be positive-sized and fit in the FOV")
        if self.marker_intensity < 0 or self.background < 0 or self.speckle_std < 0:
            raise PhantomError("intensities and noise std must be >= 0")


@dataclass
class SplinePath:
    """Natural cubic spline through knots at uniform parameters 0..J-1."""

    knots: np.ndarray              # [J, 3]
    coeffs: np.ndarray             # [J-1, 4, 3]: a + b*u + c*u^2 + d*u^3

    @property
    def segments(self) -> int:
        return self.coeffs.shape[0]

    def evaluate(self, taus) -> np.ndarray:
        taus = np.asarray(taus, dtype=np.float64)
        j = np.clip(np.floor(taus).astype(np.int64), 0, self.segments - 1)
        u = (taus - j)[:, None]
        a, b, c, d = (self.coeffs[j, i, :] for i in range(4))
        return a + u * (b + u * (c + u * d))


def generate_knots(cfg: TrajectoryConfig, rng: np.random.Generator) -> np.ndarray:
    """J ~ uniform[knots_min, knots_max] knots inside the margin-inset FOV."""
    j = int(rng.integers(cfg.knots_min, cfg.knots_max + 1))
    fov = np.asarray(cfg.fov_mm)
    lo = np.full(3, cfg.margin_mm)
    hi = fov - cfg.margin_mm
    return rng.uniform(lo, hi, size=(j, 3))


def _solve_natural_second_derivs(y: np.ndarray) -> np.ndarray:
    """Second derivatives of the natural cubic spline on unit-spaced knots.

    Thomas algorithm on the tridiagonal system
    M[j-1] + 4 M[j] + M[j+1] = 6 (y[j+1] - 2 y[j] + y[j-1]), M[0]=M[-1]=0.
    """
    j = y.shape[0]
    m = np.zeros_like(y)
    if j <= 2:
        return m
    rhs = 6.0 * (y[2:] - 2.0 * y[1:-1] + y[:-2])
    n = j - 2
    cp = np.zeros(n)
    dp = np.zeros((n,) + y.shape[1:])
    cp[0] = 1.0 / 4.0
    dp[0] = rhs[0] / 4.0
    for i in range(1, n):
        denom = 4.0 - cp[i - 1]
        cp[i] = 1.0 / denom
        dp[i] = (rhs[i] - dp[i - 1]) / denom
    m[n] = dp[n - 1]
    for i in range(n - 2, -1, -1):
        m[i + 1] = dp[i] - cp[i] * m[i + 2]
    return m


def fit_spline(knots) -> SplinePath:
    knots = np.asarray(knots, dtype=np.float64)
    if knots.ndim != 2 or knots.shape[0] < 2 or knots.shape[1] != 3:
        raise PhantomError(f"need >= 2 knots of dimension 3, got {knots.shape}")
    m = _solve_natural_second_derivs(knots)
    y0, y1 = knots[:-1], knots[1:]
    m0, m1 = m[:-1], m[1:]
    coeffs = np.stack([
        y0,
        (y1 - y0) - (2.0 * m0 + m1) / 6.0,
        m0 / 2.0,
        (m1 - m0) / 6.0,
    ], axis=1)
    return SplinePath(knots=knots, coeffs=coeffs)


def sample_spline(path: SplinePath, count: int) -> np.ndarray:
    """Evaluate at ``count`` equidistant parameter values over [0, J-1]."""
    if count < 2:
        raise PhantomError("sample count must be >= 2")
    taus = np.linspace(0.0, float(path.segments), count)
    return path.evaluate(taus)


def _axis_overlap(extent: int, fov: float, lo: float, hi: float) -> np.ndarray:
    pitch = fov / extent
    edges = np.arange(extent + 1) * pitch
    return np.clip(np.minimum(edges[1:], hi) - np.maximum(edges[:-1], lo), 0.0, pitch) / pitch


def render_volume(pos, cfg: PhantomConfig, rng: np.random.Generator | None = None) -> np.ndarray:
    """Render a cube marker at ``pos`` (mm): ``[D,H,W,1]`` intensities.

    Voxel intensity is background + (marker - background) * partial-volume
    coverage, then multiplicative speckle ``(1 + std * N(0,1))`` clamped >= 0.
    """
    pos = np.asarray(pos, dtype=np.float64)
    if pos.shape != (3,):
        raise PhantomError(f"position must be a 3-vector, got {pos.shape}")
    if np.any(pos < 0) or np.any(pos > np.asarray(cfg.fov_mm)):
        raise PhantomError(f"position {pos} outside FOV {cfg.fov_mm}")
    half = cfg.marker_edge_mm / 2.0
    cov_axes = [
        _axis_overlap(e, f, p - half, p + half)
        for e, f, p in zip(cfg.extents, cfg.fov_mm, pos)
    ]
    coverage = cov_axes[0][:, None, None] * cov_axes[1][None, :, None] * cov_axes[2][None, None, :]
    vol = cfg.background + (cfg.marker_intensity - cfg.background) * coverage
    if cfg.speckle_std > 0 and rng is not None:
        vol = vol * (1.0 + cfg.speckle_std * rng.standard_normal(vol.shape))
        np.clip(vol, 0.0, None, out=vol)
    return vol[..., None]


@dataclass
class NormalizationRecord:
    """Per-axis mean/scale (mm) used to normalize targets; train-split only."""

    mean: np.ndarray
    scale: np.ndarray

    def normalize(self, pos_mm: np.ndarray) -> np.ndarray:
        return (pos_mm - self.mean[None, :]) / self.scale[None, :]

    def denormalize(self, units: np.ndarray) -> np.ndarray:
        return units * self.scale[None, :] + self.mean[None, :]

    def scale_um(self) -> np.ndarray:
        """Micrometers per normalized target unit, per axis."""
        return self.scale * 1000.0


@dataclass
class Dataset:
    sequences: np.ndarray          # [N, T, D, H, W, 1]
    targets: np.ndarray            # [N, 3] normalized units
    split: str
    normalization: NormalizationRecord
    trajectory_ids: np.ndarray     # [N]

    def __len__(self):
        return self.sequences.shape[0]

    def targets_mm(self) -> np.ndarray:
        return self.normalization.denormalize(self.targets)


def _trajectory_positions(traj_cfg: TrajectoryConfig, index: int) -> np.ndarray:
    rng = np.random.default_rng(np.random.SeedSequence(traj_cfg.seed, spawn_key=(index,)))
    path = fit_spline(generate_knots(traj_cfg, rng))
    pos = sample_spline(path, traj_cfg.samples_per_spline)
    # natural splines may overshoot the knot box; rendering requires FOV
    return np.clip(pos, 0.0, np.asarray(traj_cfg.fov_mm)[None, :])


def _render_trajectory(positions, traj_index, phantom_cfg) -> np.ndarray:
    vols = np.empty((positions.shape[0],) + tuple(phantom_cfg.extents) + (1,))
    for i, p in enumerate(positions):
        rng = np.random.default_rng(
            np.random.SeedSequence(phantom_cfg.seed, spawn_key=(traj_index, i))
        )
        vols[i] = render_volume(p, phantom_cfg, rng)
    return vols


def build_dataset(traj_cfg: TrajectoryConfig, phantom_cfg: PhantomConfig,
                  total_examples: int = 7000, sequence_length: int = 5,
                  split: tuple[int, int, int] = (5000, 1000, 1000)):
    """Generate (train, val, test) datasets of sliding-window sequences.

    ``split`` counts sampled positions (volumes) per split; each split is
    built from whole trajectories, with the last trajectory truncated to the
    remaining position budget, so no sequence spans two trajectories and no
    trajectory spans two splits. Targets are normalized per axis with
    train-split statistics only.
    """
    split = tuple(int(s) for s in split)
    if sum(split) != int(total_examples):
        raise PhantomError(f"split {split} does not sum to total {total_examples}")
    if any(s < sequence_length for s in split):
        raise PhantomError(f"every split needs >= T={sequence_length} positions")
    if tuple(traj_cfg.fov_mm) != tuple(phantom_cfg.fov_mm):
        raise PhantomError("trajectory and phantom FOV differ")

    traj_index = 0
    per_split = {}
    for name, quota in zip(SPLIT_NAMES, split):
        seqs, tgts, ids = [], [], []
        remaining = quota
        while remaining >= sequence_length:
            positions = _trajectory_positions(traj_cfg, traj_index)[:remaining]
            vols = _render_trajectory(positions, traj_index, phantom_cfg)
            for lo in range(positions.shape[0] - sequence_length + 1):
                hi = lo + sequence_length
                seqs.append(vols[lo:hi])
                tgts.append(positions[hi - 1])
                ids.append(traj_index)
            remaining -= positions.shape[0]
            traj_index += 1
        per_split[name] = (
            np.stack(seqs), np.stack(tgts), np.asarray(ids, dtype=np.int64)
        )

    train_targets = per_split["train"][1]
    mean = train_targets.mean(axis=0)
    scale = train_targets.std(axis=0)
    if np.any(scale <= 0):
        raise PhantomError("degenerate target distribution (zero std axis)")
    norm = NormalizationRecord(mean=mean, scale=scale)

    out = []
    for name in SPLIT_NAMES:
        seqs, tgts, ids = per_split[name]
        out.append(Dataset(
            sequences=seqs,
            targets=norm.normalize(tgts),
            split=name,
            normalization=norm,
            trajectory_ids=ids,
        ))
    return tuple(out)


# ---------------------------------------------------------------------------
# on-disk format


def save_dataset_dir(directory, datasets, traj_cfg, phantom_cfg,
                     sequence_length, split) -> None:
    directory = Path(directory)
    directory.mkdir(parents=True, exist_ok=True)
    norm = datasets[0].normalization
    manifest = {
        "format_version": DATASET_FORMAT_VERSION,
        "trajectory_config": asdict(traj_cfg),
        "phantom_config": asdict(phantom_cfg),
        "sequence_length": int(sequence_length),
        "split_positions": [int(s) for s in split],
        "sequence_counts": {d.split: len(d) for d in datasets},
        "normalization": {
            "mean": norm.mean.tolist(),
            "scale": norm.scale.tolist(),
        },
        "trajectory_ids": {d.split: d.trajectory_ids.tolist() for d in datasets},
    }
    with open(directory / "manifest.json", "w") as f:
        json.dump(manifest, f, sort_keys=True, indent=2)
        f.write("\n")
    for d in datasets:
        with open(directory / f"{d.split}.v4d", "wb") as f:
            f.write(struct.pack("<Q", len(d)))
            for i in range(len(d)):
                write_tensor(f, d.sequences[i])
                write_tensor(f, d.targets[i])


def load_manifest(directory) -> dict:
    with open(Path(directory) / "manifest.json") as f:
        manifest = json.load(f)
    version = manifest.get("format_version", 0)
    if version > DATASET_FORMAT_VERSION:
        raise PhantomError(
            f"dataset format version {version} is newer than supported "
            f"{DATASET_FORMAT_VERSION}"
        )
    return manifest


def load_dataset_dir(directory, splits=SPLIT_NAMES):
    directory = Path(directory)
    manifest = load_manifest(directory)
    norm = NormalizationRecord(
        mean=np.asarray(manifest["normalization"]["mean"]),
        scale=np.asarray(manifest["normalization"]["scale"]),
    )
    out = {}
    for name in splits:
        path = directory / f"{name}.v4d"
        with open(path, "rb") as f:
            (count,) = struct.unpack("<Q", f.read(8))
            seqs, tgts = [], []
            for _ in range(count):
                seqs.append(read_tensor(f))
                tgts.append(read_tensor(f))
        out[name] = Dataset(
            sequences=np.stack(seqs) if seqs else np.zeros((0,)),
            targets=np.stack(tgts) if tgts else np.zeros((0, 3)),
            split=name,
            normalization=norm,
            trajectory_ids=np.asarray(manifest["trajectory_ids"][name], dtype=np.int64),
        )
    return out, manifest
