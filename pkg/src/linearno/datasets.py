"""Dataset assembly for the Burgers completer and self-operator tasks.

A *completer* sample reconstructs the solution field on a space-time
region from a sparse subset of its own points: queries are every grid
point with t in [0.25, 0.75], the source is K = floor(rate * N) of those
query points drawn without replacement, and the model must fill in the
rest.

Splits are generated from one seeded stream (train, then val, then
test), standardized with train-split statistics only, and persisted as
one container file per split holding the raw trajectories plus enough
metadata to rebuild the model-ready arrays deterministically.
"""
from __future__ import annotations

import os
from dataclasses import asdict, dataclass, field

import numpy as np

from . import burgers
from .container import load, pack_json, save, unpack_json

REGION_DEFAULT = (0.25, 0.75)


@dataclass(frozen=True)
class DataSpec:
    """Everything needed to regenerate a dataset bit-for-bit."""

    n_x: int = 64
    n_t: int = 64
    samples_train: int = 512
    samples_val: int = 64
    samples_test: int = 64
    rate: float = 0.1
    region: tuple = REGION_DEFAULT
    nu: float = burgers.NU_DEFAULT
    t_end: float = 1.0
    seed: int = 0

    def __post_init__(self):
        object.__setattr__(self, "region", tuple(float(v) for v in self.region))
        if not 0.0 < self.rate <= 1.0:
            raise ValueError(f"rate must lie in (0, 1], got {self.rate}")
        if self.region[0] >= self.region[1]:
            raise ValueError(f"region must be an increasing interval, got {self.region}")


def region_frames(spec: DataSpec):
    """Indices of stored frames whose time lies inside the region (inclusive)."""
    t = np.linspace(0.0, spec.t_end, spec.n_t)
    lo, hi = spec.region
    return np.nonzero((t >= lo - 1e-12) & (t <= hi + 1e-12))[0]


def query_coords(spec: DataSpec):
    """Space-time query coordinates [N, 2] (columns x, t), frame-major."""
    x = burgers.grid(spec.n_x)
    t = np.linspace(0.0, spec.t_end, spec.n_t)[region_frames(spec)]
    tt, xx = np.meshgrid(t, x, indexing="ij")
    return np.stack([xx.ravel(), tt.ravel()], axis=-1)


def n_source_points(spec: DataSpec):
    n = region_frames(spec).size * spec.n_x
    return int(np.floor(spec.rate * n))


def generate(spec: DataSpec):
    """Generate all three splits; returns {split: dict of arrays}.

    Each split dict holds ``trajectories`` [S, n_t, n_x] and
    ``source_idx`` [S, K] (indices into the flattened query grid).
    Every trajectory is validated (dissipation + mean conservation).
    """
    rng = np.random.default_rng(spec.seed)
    counts = {"train": spec.samples_train, "val": spec.samples_val, "test": spec.samples_test}
    total = sum(counts.values())
    u0 = burgers.sample_initial_conditions(spec.n_x, total, rng)
    n_query = region_frames(spec).size * spec.n_x
    k = n_source_points(spec)
    if k < 1:
        raise ValueError(
            f"rate {spec.rate} leaves no source points (rate * {n_query} < 1)")

    splits = {}
    offset = 0
    for name, count in counts.items():
        traj = np.empty((count, spec.n_t, spec.n_x), dtype=np.float64)
        idx = np.empty((count, k), dtype=np.uint64)
        for i in range(count):
            traj[i] = burgers.solve(u0[offset + i], spec.n_t, spec.t_end, spec.nu)
            burgers.check_trajectory(traj[i])
            idx[i] = np.sort(rng.choice(n_query, size=k, replace=False)).astype(np.uint64)
        splits[name] = {"trajectories": traj, "source_idx": idx}
        offset += count
    return splits


def _standardization(spec: DataSpec, train_traj):
    """Train-split statistics for coordinates and field values."""
    coords = query_coords(spec)
    frames = region_frames(spec)
    values = train_traj[:, frames, :].reshape(-1)
    stats = {
        "coord_mean": coords.mean(axis=0).tolist(),
        "coord_std": np.maximum(coords.std(axis=0), 1e-12).tolist(),
        "value_mean": float(values.mean()),
        "value_std": float(max(values.std(), 1e-12)),
    }
    return stats


def write_dataset(spec: DataSpec, out_dir):
    """Generate and persist all splits; returns the three file paths."""
    splits = generate(spec)
    stats = _standardization(spec, splits["train"]["trajectories"])
    os.makedirs(out_dir, exist_ok=True)
    paths = {}
    for name, arrays in splits.items():
        meta = {"spec": asdict(spec), "split": name, "stats": stats}
        sections = {
            "x_grid": burgers.grid(spec.n_x),
            "t_grid": np.linspace(0.0, spec.t_end, spec.n_t),
            "trajectories": arrays["trajectories"],
            "source_idx": arrays["source_idx"],
            "meta": pack_json(meta),
        }
        path = os.path.join(out_dir, f"burgers_{name}.lnoc")
        save(path, sections)
        paths[name] = path
    return paths


@dataclass
class CompleterSplit:
    """Model-ready arrays for one split of the completion task.

    Coordinates are standardized with train statistics; ``target`` and
    ``source_values`` are standardized field values. ``stats`` retains
    the physical-unit transform so metrics can be reported physically.
    """

    query: np.ndarray          # [N, 2] shared across samples
    target: np.ndarray         # [S, N, 1]
    source_coords: np.ndarray  # [S, K, 2]
    source_values: np.ndarray  # [S, K, 1]
    stats: dict = field(repr=False)

    def __len__(self):
        return self.target.shape[0]

    def destandardize(self, values):
        return np.asarray(values) * self.stats["value_std"] + self.stats["value_mean"]


def load_completer_split(path):
    """Read one split container and assemble completer arrays."""
    sections = load(path)
    meta = unpack_json(sections["meta"])
    spec = DataSpec(**{**meta["spec"], "region": tuple(meta["spec"]["region"])})
    stats = meta["stats"]

    coords = query_coords(spec)
    c_mean = np.asarray(stats["coord_mean"])
    c_std = np.asarray(stats["coord_std"])
    query = (coords - c_mean) / c_std

    frames = region_frames(spec)
    traj = sections["trajectories"]
    values = traj[:, frames, :].reshape(traj.shape[0], -1, 1)
    target = (values - stats["value_mean"]) / stats["value_std"]

    idx = sections["source_idx"].astype(np.intp)
    source_coords = query[idx]                                    # [S, K, 2]
    source_values = np.take_along_axis(target, idx[:, :, None], axis=1)
    return CompleterSplit(query, target, source_coords, source_values, stats)


@dataclass
class SelfSplit:
    """Model-ready arrays for the full-field self-operator task.

    Input function is the initial condition broadcast to every
    space-time point; target is the whole trajectory.
    """

    coords: np.ndarray  # [N, 2] shared
    func: np.ndarray    # [S, N, 1]
    target: np.ndarray  # [S, N, 1]
    stats: dict = field(repr=False)

    def __len__(self):
        return self.target.shape[0]

    def destandardize(self, values):
        return np.asarray(values) * self.stats["value_std"] + self.stats["value_mean"]


def load_self_split(path):
    """Read one split container and assemble initial-condition -> field arrays."""
    sections = load(path)
    meta = unpack_json(sections["meta"])
    spec = DataSpec(**{**meta["spec"], "region": tuple(meta["spec"]["region"])})
    stats = meta["stats"]

    x = sections["x_grid"]
    t = sections["t_grid"]
    tt, xx = np.meshgrid(t, x, indexing="ij")
    coords = np.stack([xx.ravel(), tt.ravel()], axis=-1)
    coords = (coords - np.asarray(stats["coord_mean"])) / np.asarray(stats["coord_std"])

    traj = sections["trajectories"]
    s = traj.shape[0]
    target = (traj.reshape(s, -1, 1) - stats["value_mean"]) / stats["value_std"]
    u0 = (traj[:, 0, :] - stats["value_mean"]) / stats["value_std"]
    func = np.repeat(u0[:, None, :], t.size, axis=1).reshape(s, -1, 1)
    return SelfSplit(coords, func, target, stats)
