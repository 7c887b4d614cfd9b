"""L1 training with Adam, evaluation metrics, reference baselines and the
ablation variants."""

from __future__ import annotations

import csv
import json
import logging
import math
import os
from concurrent.futures import ThreadPoolExecutor
from dataclasses import asdict, dataclass, field
from pathlib import Path

import numpy as np

from . import tensor as tt
from .data import Dataset, WindowedDataset
from .graph import Graph
from .model import ModelConfig, ModelParams, forward, init_params
from .seeding import stream
from .tensor import DimensionError, Tensor

log = logging.getLogger(__name__)

VARIANTS = ("no_node_embedding", "no_adjacency_matrix", "no_reverse", "no_attention")


class DivergenceError(RuntimeError):
    """Training produced a non-finite loss."""


class MissingGradientError(RuntimeError):
    """An optimizer step was requested for a parameter without a gradient."""


def l1_loss(pred: Tensor, target: Tensor) -> Tensor:
    """Mean absolute deviation over every element."""
    if pred.shape != target.shape:
        raise DimensionError(f"l1_loss: prediction {pred.shape} vs target {target.shape}")
    return tt.mean_all(tt.abs_(tt.sub(pred, target)))


class Adam:
    def __init__(self, lr: float = 1e-3, beta1: float = 0.9, beta2: float = 0.999, eps: float = 1e-8):
        self.lr, self.beta1, self.beta2, self.eps = lr, beta1, beta2, eps
        self.step_count = 0
        self.m: dict[str, np.ndarray] = {}
        self.v: dict[str, np.ndarray] = {}

    def step(self, params: ModelParams) -> None:
        for name, p in params.items():
            if p.grad is None:
                raise MissingGradientError(f"no gradient for parameter {name!r}")
        self.step_count += 1
        t = self.step_count
        c1 = 1.0 - self.beta1 ** t
        c2 = 1.0 - self.beta2 ** t
        for name, p in params.items():
            g = p.grad
            if name not in self.m:
                self.m[name] = np.zeros_like(p.data)
                self.v[name] = np.zeros_like(p.data)
            m, v = self.m[name], self.v[name]
            m *= self.beta1
            m += (1.0 - self.beta1) * g
            v *= self.beta2
            v += (1.0 - self.beta2) * (g * g)
            p.data -= (self.lr * (m / c1) / (np.sqrt(v / c2) + self.eps)).astype(p.dtype)


@dataclass
class TrainState:
    seed: int
    epoch: int = 0
    best_val_mae: float = math.inf
    best_epoch: int = -1
    best_params: dict = field(default_factory=dict, repr=False)
    history: list = field(default_factory=list)
    optimizer: Adam | None = field(default=None, repr=False)
    stopped_early: bool = False

    @property
    def step(self) -> int:
        return 0 if self.optimizer is None else self.optimizer.step_count


def _denorm_consts(normalizer, n_nodes: int, shape, dtype):
    mean, std = normalizer.target_stats(n_nodes)
    b, n, t, _ = shape
    m = np.broadcast_to(mean.reshape(1, n, 1, 1), shape).astype(dtype)
    s = np.broadcast_to(std.reshape(1, n, 1, 1), shape).astype(dtype)
    return m, s


def raw_forward(x: np.ndarray, graph: Graph, params: ModelParams, cfg: ModelConfig, normalizer) -> Tensor:
    """Forward on normalised windows [B,T,N,C] returning raw-unit forecasts [B,N,T,1]."""
    dtype = next(iter(params.items()))[1].dtype
    pred = forward(Tensor(x, dtype=dtype), graph, params, cfg)
    m, s = _denorm_consts(normalizer, cfg.n_nodes, pred.shape, dtype)
    return tt.add(tt.mul(pred, s), m)


def batch_loss(x, y, graph, params, cfg, normalizer) -> Tensor:
    pred = raw_forward(x, graph, params, cfg, normalizer)
    target = Tensor(np.ascontiguousarray(y.transpose(0, 2, 1, 3)), dtype=pred.dtype)
    return l1_loss(pred, target)


def train(
    cfg: ModelConfig,
    dataset: Dataset,
    graph: Graph,
    *,
    epochs: int = 100,
    batch_size: int = 64,
    lr: float = 1e-3,
    seed: int = 0,
    patience: int = 15,
    params: ModelParams | None = None,
    dtype=None,
    workers: int | None = None,
    on_epoch=None,
) -> tuple[TrainState, ModelParams]:
    """Epoch loop with seeded shuffling, validation MAE after each epoch and
    best-checkpoint retention. Returns the state and the best parameters."""
    if params is None:
        params = init_params(cfg, stream(seed, "init"), dtype=dtype)
    shuffle = stream(seed, "shuffle")
    opt = Adam(lr=lr)
    state = TrainState(seed=seed, optimizer=opt)
    state.best_params = params.arrays()
    if epochs <= 0:
        return state, params

    stale = 0
    for epoch in range(1, epochs + 1):
        order = shuffle.permutation(len(dataset.train))
        total, count = 0.0, 0
        for x, y in dataset.train.batches(batch_size, order):
            tt.reset_tape()
            params.zero_grad()
            loss = batch_loss(x, y, graph, params, cfg, dataset.normalizer)
            value = float(loss.data)
            if not math.isfinite(value):
                raise DivergenceError(
                    f"non-finite loss {value} at epoch {epoch}, optimizer step {opt.step_count + 1}"
                )
            loss.backward()
            opt.step(params)
            total += value * len(x)
            count += len(x)
        train_loss = total / count
        val = evaluate(params, graph, cfg, dataset.val, batch_size=batch_size, workers=workers)
        state.epoch = epoch
        state.history.append({"epoch": epoch, "train_loss": train_loss, "val_mae": val.mae})
        log.info("epoch %d train_loss %.4f val_mae %.4f", epoch, train_loss, val.mae)
        if on_epoch is not None:
            on_epoch(epoch, train_loss, val.mae)
        if val.mae < state.best_val_mae:
            state.best_val_mae = val.mae
            state.best_epoch = epoch
            state.best_params = params.arrays()
            stale = 0
        else:
            stale += 1
            if stale >= patience:
                state.stopped_early = True
                break
    params.load_arrays(state.best_params)
    return state, params


# evaluation


def _env_workers() -> int:
    try:
        return max(1, int(os.environ.get("MSTF_THREADS", "1")))
    except ValueError:
        return 1


def predict(
    params: ModelParams,
    graph: Graph,
    cfg: ModelConfig,
    inputs: np.ndarray,
    normalizer,
    batch_size: int = 64,
    workers: int | None = None,
) -> np.ndarray:
    """Raw-unit forecasts [K,T,N,1] for normalised input windows [K,T,N,C]."""
    workers = workers or _env_workers()
    starts = list(range(0, len(inputs), batch_size))

    def run(s):
        with tt.no_grad():
            out = raw_forward(inputs[s:s + batch_size], graph, params, cfg, normalizer)
        return out.data.transpose(0, 2, 1, 3)

    if workers > 1 and len(starts) > 1:
        with ThreadPoolExecutor(max_workers=workers) as pool:
            parts = list(pool.map(run, starts))
    else:
        parts = [run(s) for s in starts]
    return np.concatenate(parts, axis=0).astype(np.float64)


def metrics(y_true: np.ndarray, y_pred: np.ndarray) -> tuple[float, float, float, int]:
    """MAE, RMSE, MAPE (percent, zero targets excluded) and the exclusion count."""
    y_true = np.asarray(y_true, dtype=np.float64)
    y_pred = np.asarray(y_pred, dtype=np.float64)
    err = y_true - y_pred
    mae = float(np.abs(err).mean())
    rmse = float(np.sqrt((err * err).mean()))
    nz = y_true != 0
    excluded = int((~nz).sum())
    mape = float(100.0 * np.abs(err[nz] / y_true[nz]).mean()) if nz.any() else float("nan")
    return mae, rmse, mape, excluded


@dataclass
class EvalReport:
    mae: float
    rmse: float
    mape: float
    horizon_mae: list
    horizon_rmse: list
    horizon_mape: list
    n_samples: int
    n_windows: int
    mape_excluded: int

    @classmethod
    def from_arrays(cls, y_true: np.ndarray, y_pred: np.ndarray) -> "EvalReport":
        """Arrays shaped [K, T, N(, 1)]."""
        if y_true.shape != y_pred.shape:
            raise DimensionError(f"targets {y_true.shape} vs predictions {y_pred.shape}")
        if y_true.size == 0:
            raise ValueError("cannot evaluate an empty split")
        mae, rmse, mape, excl = metrics(y_true, y_pred)
        hm, hr, hp = [], [], []
        for h in range(y_true.shape[1]):
            a, b, c, _ = metrics(y_true[:, h], y_pred[:, h])
            hm.append(a)
            hr.append(b)
            hp.append(c)
        return cls(mae, rmse, mape, hm, hr, hp, int(y_true.size), int(y_true.shape[0]), excl)

    def to_dict(self) -> dict:
        return asdict(self)

    def to_json(self, path) -> None:
        Path(path).write_text(json.dumps(self.to_dict(), indent=2))

    def to_csv(self, path) -> None:
        with Path(path).open("w", newline="") as fh:
            wr = csv.writer(fh)
            wr.writerow(["horizon", "mae", "rmse", "mape"])
            for h, (a, b, c) in enumerate(zip(self.horizon_mae, self.horizon_rmse, self.horizon_mape), start=1):
                wr.writerow([h, repr(a), repr(b), repr(c)])

    def table(self) -> str:
        lines = [f"{'horizon':>8} {'MAE':>10} {'RMSE':>10} {'MAPE%':>9}"]
        for h, (a, b, c) in enumerate(zip(self.horizon_mae, self.horizon_rmse, self.horizon_mape), start=1):
            lines.append(f"{h:>8} {a:>10.4f} {b:>10.4f} {c:>9.3f}")
        lines.append(f"{'overall':>8} {self.mae:>10.4f} {self.rmse:>10.4f} {self.mape:>9.3f}")
        return "\n".join(lines)


def evaluate(
    params: ModelParams,
    graph: Graph,
    cfg: ModelConfig,
    split: WindowedDataset,
    batch_size: int = 64,
    workers: int | None = None,
) -> EvalReport:
    if len(split) == 0:
        raise ValueError(f"split {split.split!r} is empty")
    pred = predict(params, graph, cfg, split.inputs, split.normalizer, batch_size, workers)
    return EvalReport.from_arrays(split.targets, pred)


# baselines and ablations


def ha_predictions(split: WindowedDataset) -> np.ndarray:
    """Every horizon step forecast as the per-node mean of the raw input window."""
    raw = split.raw_inputs()[..., :1]
    mean = raw.mean(axis=1, keepdims=True)
    return np.broadcast_to(mean, split.targets.shape).copy()


def baseline_ha(split: WindowedDataset) -> EvalReport:
    return EvalReport.from_arrays(split.targets, ha_predictions(split))


def gru_baseline_config(base: ModelConfig) -> ModelConfig:
    """Plain GRU: shared dense weights per node, no graph, one direction, no attention."""
    return base.replace(adjacency_mode="none", use_reverse=False, use_attention=False)


def ablation_factory(base: ModelConfig, variant: str | None = None) -> ModelConfig:
    if variant in (None, "", "full"):
        return base
    if variant == "no_node_embedding":
        return base.replace(adjacency_mode="predefined_only")
    if variant == "no_adjacency_matrix":
        return base.replace(adjacency_mode="adaptive_only")
    if variant == "no_reverse":
        return base.replace(use_reverse=False)
    if variant == "no_attention":
        return base.replace(use_attention=False)
    raise ValueError(f"unknown ablation variant {variant!r}; choose from {', '.join(VARIANTS)}")
