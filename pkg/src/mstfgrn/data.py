"""Flow series ingestion, z-score normalisation, chronological splits and
sliding windows, plus a seeded synthetic road-network corpus."""

from __future__ import annotations

import csv
import json
import math
from dataclasses import dataclass, field
from pathlib import Path
from typing import Iterator, Sequence

import numpy as np

from .graph import Graph, IngestError, erdos_graph, grid_graph, ring_graph
from .seeding import stream

DAY_STEPS = 288  # 5-minute steps per day


class ConfigError(ValueError):
    """Requested split or window layout is impossible for the given series."""


@dataclass
class FlowSeries:
    values: np.ndarray  # [L, N, C]
    start_timestamp: str | None = None
    node_ids: tuple | None = None

    def __post_init__(self):
        v = np.asarray(self.values, dtype=np.float64)
        if v.ndim == 2:
            v = v[:, :, None]
        if v.ndim != 3:
            raise IngestError(f"flow values must be [L, N, C], got shape {v.shape}")
        self.values = v

    @property
    def length(self) -> int:
        return self.values.shape[0]

    @property
    def n_nodes(self) -> int:
        return self.values.shape[1]

    @property
    def n_channels(self) -> int:
        return self.values.shape[2]

    def slice(self, start: int, stop: int) -> "FlowSeries":
        return FlowSeries(self.values[start:stop], None, self.node_ids)


def _check_finite(v: np.ndarray, path) -> None:
    bad = np.argwhere(~np.isfinite(v))
    if len(bad):
        shown = ", ".join(str(tuple(int(i) for i in b)) for b in bad[:10])
        more = f" (+{len(bad) - 10} more)" if len(bad) > 10 else ""
        raise IngestError(f"{path}: non-finite values at (step, node[, channel]) {shown}{more}")


def _load_csv(path: Path) -> FlowSeries:
    rows = []
    node_ids = None
    width = None
    with path.open(newline="", encoding="utf-8") as fh:
        for lineno, row in enumerate(csv.reader(fh), start=1):
            if not row:
                continue
            if lineno == 1:
                try:
                    [float(c) for c in row]
                except ValueError:
                    node_ids = tuple(c.strip() for c in row)
                    width = len(row)
                    continue
            if width is None:
                width = len(row)
            if len(row) != width:
                raise IngestError(f"{path}:{lineno}: ragged row with {len(row)} cells, expected {width}")
            try:
                rows.append([float(c) for c in row])
            except ValueError:
                raise IngestError(f"{path}:{lineno}: non-numeric cell in {row!r}") from None
    if not rows:
        raise IngestError(f"{path}: no data rows")
    v = np.asarray(rows)
    _check_finite(v, path)
    return FlowSeries(v[:, :, None], node_ids=node_ids)


def sidecar_path(path: Path) -> Path:
    return path.with_name(path.name + ".json")


def _load_blob(path: Path) -> FlowSeries:
    side = sidecar_path(path)
    if not side.exists():
        raise IngestError(f"{path}: missing shape sidecar {side}")
    meta = json.loads(side.read_text())
    shape = tuple(int(s) for s in meta["shape"])
    if len(shape) == 2:
        shape = shape + (1,)
    raw = np.fromfile(path, dtype="<f4")
    if raw.size != int(np.prod(shape)):
        raise IngestError(f"{path}: sidecar shape {list(shape)} needs {int(np.prod(shape))} floats, file has {raw.size}")
    v = raw.reshape(shape).astype(np.float64)
    _check_finite(v, path)
    return FlowSeries(v, meta.get("start_timestamp"), tuple(meta["node_ids"]) if meta.get("node_ids") else None)


def _load_npz(path: Path) -> FlowSeries:
    # PeMS archives: data[L, N, F], first feature is flow
    with np.load(path) as z:
        v = np.asarray(z["data"], dtype=np.float64)
    if v.ndim == 3:
        v = v[:, :, :1]
    _check_finite(v, path)
    return FlowSeries(v)


def load_flow(path) -> FlowSeries:
    """Load a flow CSV (rows = steps, columns = nodes), an f32 blob with a
    ``<name>.json`` shape sidecar, or a PeMS ``.npz`` archive."""
    path = Path(path)
    if not path.exists():
        raise FileNotFoundError(f"flow file not found: {path}")
    suffix = path.suffix.lower()
    if suffix == ".csv":
        return _load_csv(path)
    if suffix == ".npz":
        return _load_npz(path)
    return _load_blob(path)


def write_flow_csv(series: FlowSeries, path) -> None:
    if series.n_channels != 1:
        raise ValueError("CSV flow files carry a single channel")
    with Path(path).open("w", newline="", encoding="utf-8") as fh:
        wr = csv.writer(fh)
        ids = series.node_ids or tuple(f"n{i}" for i in range(series.n_nodes))
        wr.writerow(ids)
        for row in series.values[:, :, 0]:
            wr.writerow([repr(float(x)) for x in row])


def write_flow_blob(series: FlowSeries, path) -> None:
    path = Path(path)
    series.values.astype("<f4").tofile(path)
    meta = {"shape": list(series.values.shape), "dtype": "<f4"}
    if series.start_timestamp:
        meta["start_timestamp"] = series.start_timestamp
    if series.node_ids:
        meta["node_ids"] = list(series.node_ids)
    sidecar_path(path).write_text(json.dumps(meta))


@dataclass(frozen=True)
class Normalizer:
    """Z-score statistics; per-channel scalars ([C]) or per-node ([N, C])."""

    mean: np.ndarray
    std: np.ndarray

    def __post_init__(self):
        if not (np.asarray(self.std) > 0).all():
            raise ValueError("normalizer std must be positive")

    @classmethod
    def fit(cls, series: FlowSeries, per_node: bool = False) -> "Normalizer":
        v = series.values
        axes = (0,) if per_node else (0, 1)
        mean = v.mean(axis=axes)
        std = v.std(axis=axes)
        std = np.where(std > 0, std, 1.0)
        return cls(mean, std)

    @property
    def per_node(self) -> bool:
        return np.ndim(self.mean) == 2

    def normalize(self, x: np.ndarray) -> np.ndarray:
        """x [..., N, C] in raw units."""
        return (x - self.mean) / self.std

    def denormalize(self, x: np.ndarray) -> np.ndarray:
        return x * self.std + self.mean

    def target_stats(self, n_nodes: int) -> tuple[np.ndarray, np.ndarray]:
        """Per-node mean/std of the forecast channel, each shaped [N]."""
        if self.per_node:
            return self.mean[:, 0].copy(), self.std[:, 0].copy()
        return np.full(n_nodes, self.mean[0]), np.full(n_nodes, self.std[0])

    def to_dict(self) -> dict:
        return {"mean": np.asarray(self.mean).tolist(), "std": np.asarray(self.std).tolist()}

    @classmethod
    def from_dict(cls, d: dict) -> "Normalizer":
        return cls(np.asarray(d["mean"], dtype=np.float64), np.asarray(d["std"], dtype=np.float64))


@dataclass
class WindowedDataset:
    inputs: np.ndarray  # [K, T, N, C], normalised
    targets: np.ndarray  # [K, T, N, 1], raw units
    split: str
    normalizer: Normalizer
    source_length: int = 0
    window_starts: np.ndarray = field(default=None, repr=False)

    def __len__(self) -> int:
        return self.inputs.shape[0]

    @property
    def horizon(self) -> int:
        return self.inputs.shape[1]

    @property
    def n_nodes(self) -> int:
        return self.inputs.shape[2]

    def batches(self, batch_size: int, order: np.ndarray | None = None) -> Iterator[tuple[np.ndarray, np.ndarray]]:
        idx = np.arange(len(self)) if order is None else order
        for s in range(0, len(idx), batch_size):
            sel = idx[s:s + batch_size]
            yield self.inputs[sel], self.targets[sel]

    def raw_inputs(self) -> np.ndarray:
        return self.normalizer.denormalize(self.inputs)


def chronological_split(
    series: FlowSeries, ratios: Sequence[float] = (0.6, 0.2, 0.2), horizon: int = 12
) -> tuple[FlowSeries, FlowSeries, FlowSeries]:
    """Contiguous train/val/test cuts of ``floor(L * r)`` steps; the remainder goes to test."""
    if len(ratios) != 3 or not math.isclose(sum(ratios), 1.0, abs_tol=1e-9):
        raise ConfigError(f"split ratios must be three values summing to 1, got {tuple(ratios)}")
    L = series.length
    n_train = math.floor(L * ratios[0])
    n_val = math.floor(L * ratios[1])
    n_test = L - n_train - n_val
    for name, n in (("train", n_train), ("val", n_val), ("test", n_test)):
        if n < 2 * horizon:
            raise ConfigError(
                f"{name} split has {n} steps but a window of horizon {horizon} needs {2 * horizon}"
            )
    return (
        series.slice(0, n_train),
        series.slice(n_train, n_train + n_val),
        series.slice(n_train + n_val, L),
    )


def make_windows(series: FlowSeries, horizon: int, normalizer: Normalizer, split: str = "train") -> WindowedDataset:
    """All stride-1 (input, target) pairs: inputs rows [i, i+T), targets [i+T, i+2T)."""
    v = series.values
    L, T = v.shape[0], horizon
    if L < 2 * T:
        raise ConfigError(f"series of length {L} cannot host a window of horizon {T}")
    k = L - 2 * T + 1
    starts = np.arange(k)
    idx = starts[:, None] + np.arange(T)[None, :]
    raw_in = v[idx]  # [K, T, N, C]
    targets = v[idx + T][..., :1]
    return WindowedDataset(normalizer.normalize(raw_in), targets, split, normalizer, L, starts)


@dataclass
class Dataset:
    train: WindowedDataset
    val: WindowedDataset
    test: WindowedDataset
    normalizer: Normalizer

    def split(self, name: str) -> WindowedDataset:
        return {"train": self.train, "val": self.val, "test": self.test}[name]


def prepare_dataset(
    series: FlowSeries,
    horizon: int = 12,
    ratios: Sequence[float] = (0.6, 0.2, 0.2),
    per_node: bool = False,
) -> Dataset:
    """Split first, fit the normaliser on train only, then window each split."""
    tr, va, te = chronological_split(series, ratios, horizon)
    norm = Normalizer.fit(tr, per_node=per_node)
    return Dataset(
        make_windows(tr, horizon, norm, "train"),
        make_windows(va, horizon, norm, "val"),
        make_windows(te, horizon, norm, "test"),
        norm,
    )


# synthetic corpus


@dataclass(frozen=True)
class SyntheticSpec:
    topology: str
    n_nodes: int
    n_steps: int

    @classmethod
    def parse(cls, text: str) -> "SyntheticSpec":
        """``topology:nodes:steps``, e.g. ``ring:8:2000``."""
        parts = text.split(":")
        if len(parts) != 3:
            raise ValueError(f"synthetic corpus must be topology:nodes:steps, got {text!r}")
        topo, n, steps = parts
        if topo not in ("ring", "grid", "erdos"):
            raise ValueError(f"unknown synthetic topology {topo!r}")
        return cls(topo, int(n), int(steps))


def diurnal_profile(t: np.ndarray) -> np.ndarray:
    """Unit-amplitude daily shape: fundamental plus a weaker second harmonic."""
    w = 2 * np.pi * t / DAY_STEPS
    return np.sin(w) + 0.35 * np.sin(2 * w + 0.8)


def gen_synthetic(
    n_nodes: int,
    n_steps: int,
    topology: str = "ring",
    seed: int = 0,
    noise: float = 0.02,
    level: float = 300.0,
    amplitude: float = 100.0,
    persistence: float = 0.8,
) -> tuple[Graph, FlowSeries]:
    """Seeded corpus on a ring/grid/erdos graph.

    flow[t, i] = level_i + amplitude * profile(t) + d[t, i], where ``d`` is a
    neighbour-coupled diffusion process
    ``d[t+1] = persistence * P d[t] + amplitude * noise * eps[t]`` with ``P``
    the self-loop-augmented row-normalised adjacency and ``eps`` standard
    normal. With ``noise=0`` the series is exactly the sinusoid mixture.
    """
    rng = stream(seed, "synth")
    if topology == "ring":
        graph = ring_graph(n_nodes)
    elif topology == "grid":
        graph = grid_graph(n_nodes)
    elif topology == "erdos":
        graph = erdos_graph(n_nodes, min(1.0, 3.0 / max(n_nodes - 1, 1)), rng)
    else:
        raise ValueError(f"unknown topology {topology!r}")

    levels = level * (1.0 + 0.2 * rng.uniform(-1, 1, size=n_nodes))
    t = np.arange(n_steps, dtype=np.float64)
    base = levels[None, :] + amplitude * diurnal_profile(t)[:, None]

    a = graph.adjacency.astype(np.float64) + np.eye(n_nodes)
    p = a / a.sum(axis=1, keepdims=True)
    eps = rng.standard_normal((n_steps, n_nodes))
    d = np.zeros((n_steps, n_nodes))
    scale = amplitude * noise
    for k in range(1, n_steps):
        d[k] = persistence * (p @ d[k - 1]) + scale * eps[k]
    series = FlowSeries((base + d)[:, :, None], node_ids=tuple(str(i) for i in range(n_nodes)))
    return graph, series


def pearson_matrix(series: FlowSeries) -> np.ndarray:
    return np.corrcoef(series.values[:, :, 0].T)


__all__ = [
    "ConfigError",
    "Dataset",
    "FlowSeries",
    "Normalizer",
    "SyntheticSpec",
    "WindowedDataset",
    "chronological_split",
    "gen_synthetic",
    "load_flow",
    "make_windows",
    "prepare_dataset",
    "write_flow_blob",
    "write_flow_csv",
]
