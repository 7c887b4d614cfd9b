"""Command-line entry points: train, eval, predict, ablate.

Exit codes: 0 success, 2 input error, 3 state/shape error, 4 numerical divergence.
"""

from __future__ import annotations

import argparse
import csv
import json
import logging
import sys
from dataclasses import asdict, dataclass, field, fields
from pathlib import Path

import numpy as np

from . import tensor as tt
from .data import ConfigError, Normalizer, SyntheticSpec, gen_synthetic, load_flow, prepare_dataset
from .graph import IngestError, load_edge_list, read_node_ids
from .model import CheckpointError, ModelConfig, load_checkpoint, read_checkpoint_config, save_checkpoint
from .tensor import DimensionError, TapeStateError
from .training import (
    VARIANTS,
    DivergenceError,
    EvalReport,
    ablation_factory,
    baseline_ha,
    evaluate,
    predict,
    train,
)

log = logging.getLogger("mstfgrn")

EXIT_OK, EXIT_INPUT, EXIT_STATE, EXIT_DIVERGED = 0, 2, 3, 4


@dataclass
class RunConfig:
    command: str = "train"
    edges: str | None = None
    flows: str | None = None
    node_ids: str | None = None
    synthetic: str | None = None
    horizon: int = 12
    embed_dim: int = 10
    hidden: int = 64
    gcn_layers: int = 1
    adjacency_mode: str = "semi_autonomous"
    adjacency_combine: str = "mask"
    head: str = "flatten"
    variant: str | None = None
    batch: int = 64
    lr: float = 1e-3
    epochs: int = 100
    patience: int = 15
    seed: int = 0
    repeats: int = 1
    precision: str = "f32"
    out: str = "runs/latest"
    extra: dict = field(default_factory=dict)

    def model_config(self, n_nodes: int, input_dim: int = 1) -> ModelConfig:
        base = ModelConfig(
            n_nodes=n_nodes,
            input_dim=input_dim,
            hidden_dim=self.hidden,
            embed_dim=self.embed_dim,
            horizon=self.horizon,
            gcn_layers=self.gcn_layers,
            adjacency_mode=self.adjacency_mode,
            adjacency_combine=self.adjacency_combine,
            head=self.head,
        )
        return ablation_factory(base, self.variant)

    def to_dict(self) -> dict:
        return asdict(self)

    @classmethod
    def from_dict(cls, d: dict) -> "RunConfig":
        known = {f.name for f in fields(cls)}
        return cls(**{k: v for k, v in d.items() if k in known})


def load_corpus(rc: RunConfig):
    """(graph, series) for the configured data source."""
    if rc.synthetic:
        spec = SyntheticSpec.parse(rc.synthetic)
        return gen_synthetic(spec.n_nodes, spec.n_steps, spec.topology, seed=rc.seed)
    if not rc.flows or not rc.edges:
        raise ConfigError("need --synthetic, or both --edges and --flows")
    for p in (rc.flows, rc.edges):
        if not Path(p).exists():
            raise FileNotFoundError(f"input file not found: {p}")
    series = load_flow(rc.flows)
    ids = read_node_ids(rc.node_ids) if rc.node_ids else None
    graph = load_edge_list(rc.edges, series.n_nodes, ids)
    return graph, series


def _dtype(rc: RunConfig):
    return np.float64 if rc.precision == "f64" else np.float32


def _train_once(rc: RunConfig, graph, dataset, out: Path, seed: int) -> EvalReport:
    cfg = rc.model_config(graph.n_nodes, dataset.train.inputs.shape[-1])
    out.mkdir(parents=True, exist_ok=True)
    log_rows = []
    state, params = train(
        cfg,
        dataset,
        graph,
        epochs=rc.epochs,
        batch_size=rc.batch,
        lr=rc.lr,
        seed=seed,
        patience=rc.patience,
        dtype=_dtype(rc),
        on_epoch=lambda e, tl, vm: log_rows.append((e, tl, vm)),
    )
    with (out / "train_log.csv").open("w", newline="") as fh:
        wr = csv.writer(fh)
        wr.writerow(["epoch", "train_loss", "val_mae"])
        for e, tl, vm in log_rows:
            wr.writerow([e, repr(tl), repr(vm)])
    resolved = RunConfig.from_dict({**rc.to_dict(), "seed": seed, "out": str(out)})
    extra = {
        "run": resolved.to_dict(),
        "normalizer": dataset.normalizer.to_dict(),
        "best_epoch": state.best_epoch,
        "best_val_mae": state.best_val_mae,
        "steps": state.step,
    }
    save_checkpoint(out / "model.ckpt", params, cfg, extra)
    (out / "config.json").write_text(json.dumps(resolved.to_dict(), indent=2, sort_keys=True))
    report = evaluate(params, graph, cfg, dataset.test, batch_size=rc.batch)
    report.to_json(out / "report.json")
    report.to_csv(out / "report.csv")
    return report


def cmd_train(rc: RunConfig) -> int:
    tt.set_precision(rc.precision)
    graph, series = load_corpus(rc)
    dataset = prepare_dataset(series, rc.horizon)
    out = Path(rc.out)
    out.mkdir(parents=True, exist_ok=True)
    (out / "config.json").write_text(json.dumps(rc.to_dict(), indent=2, sort_keys=True))
    if rc.repeats <= 1:
        report = _train_once(rc, graph, dataset, out, rc.seed)
        print(report.table())
        return EXIT_OK

    reports = []
    for i in range(rc.repeats):
        r = _train_once(rc, graph, dataset, out / f"repeat_{i}", rc.seed + i)
        reports.append(r)
        print(f"repeat {i}: MAE {r.mae:.4f} RMSE {r.rmse:.4f} MAPE {r.mape:.3f}%")
    summary = {"runs": [r.to_dict() for r in reports]}
    for key in ("mae", "rmse", "mape"):
        vals = np.array([getattr(r, key) for r in reports])
        summary[key] = {"mean": float(vals.mean()), "std": float(vals.std(ddof=0))}
    (out / "report.json").write_text(json.dumps(summary, indent=2))
    print(
        "mean±std  MAE {:.4f}±{:.4f}  RMSE {:.4f}±{:.4f}  MAPE {:.3f}±{:.3f}%".format(
            summary["mae"]["mean"], summary["mae"]["std"],
            summary["rmse"]["mean"], summary["rmse"]["std"],
            summary["mape"]["mean"], summary["mape"]["std"],
        )
    )
    return EXIT_OK


def _checkpoint_path(p: str) -> Path:
    path = Path(p)
    if path.is_dir():
        path = path / "model.ckpt"
    if not path.exists():
        raise FileNotFoundError(f"checkpoint not found: {path}")
    return path


def _resolve_from_checkpoint(ckpt: Path, overrides: dict) -> tuple[RunConfig, dict]:
    doc = read_checkpoint_config(ckpt)
    stored = RunConfig.from_dict(doc.get("run", {}))
    merged = {**stored.to_dict(), **{k: v for k, v in overrides.items() if v is not None}}
    return RunConfig.from_dict(merged), doc


def cmd_eval(rc_overrides: dict, checkpoint: str) -> int:
    ckpt = _checkpoint_path(checkpoint)
    rc, doc = _resolve_from_checkpoint(ckpt, rc_overrides)
    tt.set_precision(rc.precision)
    graph, series = load_corpus(rc)
    dataset = prepare_dataset(series, rc.horizon)
    cfg = rc.model_config(graph.n_nodes, series.n_channels)
    params = load_checkpoint(ckpt, cfg, dtype=_dtype(rc))
    report = evaluate(params, graph, cfg, dataset.test, batch_size=rc.batch)
    out = Path(rc_overrides.get("out") or ckpt.parent)
    out.mkdir(parents=True, exist_ok=True)
    report.to_json(out / "eval_report.json")
    report.to_csv(out / "eval_report.csv")
    print(report.table())
    return EXIT_OK


def cmd_predict(rc_overrides: dict, checkpoint: str, window: str) -> int:
    ckpt = _checkpoint_path(checkpoint)
    rc, doc = _resolve_from_checkpoint(ckpt, rc_overrides)
    tt.set_precision(rc.precision)
    cfg = ModelConfig.from_dict(doc["model"])
    params = load_checkpoint(ckpt, cfg, dtype=_dtype(rc))
    norm = Normalizer.from_dict(doc["normalizer"])
    raw = load_flow(window).values
    if raw.shape[0] != cfg.horizon:
        raise ConfigError(f"window has {raw.shape[0]} steps, model expects {cfg.horizon}")
    if raw.shape[1:] != (cfg.n_nodes, cfg.input_dim):
        raise ConfigError(f"window shape {raw.shape} does not match {cfg.n_nodes} nodes x {cfg.input_dim} channels")
    graph, _ = _graph_for_predict(rc, cfg)
    x = norm.normalize(raw)[None]
    pred = predict(params, graph, cfg, x, norm, batch_size=1, workers=1)[0, :, :, 0]
    out = Path(rc_overrides.get("out") or ckpt.parent / "forecast.csv")
    if out.suffix.lower() != ".csv":
        out.mkdir(parents=True, exist_ok=True)
        out = out / "forecast.csv"
    out.parent.mkdir(parents=True, exist_ok=True)
    with out.open("w", newline="") as fh:
        wr = csv.writer(fh)
        wr.writerow([f"n{i}" for i in range(cfg.n_nodes)])
        for row in pred:
            wr.writerow([repr(float(v)) for v in row])
    print(f"wrote {len(pred)} forecast steps to {out}")
    return EXIT_OK


def _graph_for_predict(rc: RunConfig, cfg: ModelConfig):
    if rc.synthetic:
        return load_corpus(rc)
    if not rc.edges:
        raise ConfigError("need --edges or a stored synthetic source to rebuild the graph")
    ids = read_node_ids(rc.node_ids) if rc.node_ids else None
    return load_edge_list(rc.edges, cfg.n_nodes, ids), None


def cmd_ablate(rc: RunConfig) -> int:
    tt.set_precision(rc.precision)
    graph, series = load_corpus(rc)
    dataset = prepare_dataset(series, rc.horizon)
    out = Path(rc.out)
    out.mkdir(parents=True, exist_ok=True)
    (out / "config.json").write_text(json.dumps(rc.to_dict(), indent=2, sort_keys=True))
    rows = []
    for variant in VARIANTS + ("full",):
        vrc = RunConfig.from_dict({**rc.to_dict(), "variant": None if variant == "full" else variant})
        report = _train_once(vrc, graph, dataset, out / variant, rc.seed)
        best_val = read_checkpoint_config(out / variant / "model.ckpt")["best_val_mae"]
        rows.append((variant, report, best_val))
    ha = baseline_ha(dataset.test)
    with (out / "ablation.csv").open("w", newline="") as fh:
        wr = csv.writer(fh)
        wr.writerow(["model", "mae", "rmse", "mape", "val_mae"])
        for name, r, v in rows:
            wr.writerow([name, repr(r.mae), repr(r.rmse), repr(r.mape), repr(v)])
    (out / "ablation.json").write_text(json.dumps(
        {"rows": [{"model": n, "val_mae": v, **r.to_dict()} for n, r, v in rows], "ha": ha.to_dict()}, indent=2
    ))
    print(f"{'model':<22}{'MAE':>10}{'RMSE':>10}{'MAPE%':>9}")
    for name, r, _ in rows:
        print(f"{name:<22}{r.mae:>10.4f}{r.rmse:>10.4f}{r.mape:>9.3f}")
    print(f"{'(HA baseline)':<22}{ha.mae:>10.4f}{ha.rmse:>10.4f}{ha.mape:>9.3f}")
    return EXIT_OK


def build_parser() -> argparse.ArgumentParser:
    parser = argparse.ArgumentParser(prog="mstfgrn", description=__doc__.splitlines()[0])
    parser.add_argument("-v", "--verbose", action="store_true")
    sub = parser.add_subparsers(dest="command", required=True)

    def data_flags(p, defaults: bool):
        d = (lambda v: v) if defaults else (lambda v: None)
        p.add_argument("--edges", help="edge-list CSV (from,to,cost)")
        p.add_argument("--flows", help="flow CSV, f32 blob with .json sidecar, or .npz")
        p.add_argument("--node-ids", help="file of external sensor ids, one per line")
        p.add_argument("--synthetic", help="inline corpus topology:nodes:steps, e.g. ring:8:2000")
        p.add_argument("--horizon", type=int, default=d(12))
        p.add_argument("--embed-dim", type=int, default=d(10))
        p.add_argument("--hidden", type=int, default=d(64))
        p.add_argument("--gcn-layers", type=int, default=d(1))
        p.add_argument("--adjacency-mode", choices=["semi_autonomous", "predefined_only", "adaptive_only"],
                       default=d("semi_autonomous"))
        p.add_argument("--adjacency-combine", choices=["mask", "matmul"], default=d("mask"))
        p.add_argument("--head", choices=["flatten", "per_step"], default=d("flatten"))
        p.add_argument("--variant", choices=list(VARIANTS))
        p.add_argument("--batch", type=int, default=d(64))
        p.add_argument("--seed", type=int, default=d(0))
        p.add_argument("--precision", choices=["f32", "f64"], default=d("f32"))
        p.add_argument("--out", default=d("runs/latest"))

    for name in ("train", "ablate"):
        p = sub.add_parser(name)
        data_flags(p, defaults=True)
        p.add_argument("--lr", type=float, default=1e-3)
        p.add_argument("--epochs", type=int, default=100)
        p.add_argument("--patience", type=int, default=15)
        p.add_argument("--repeats", type=int, default=1)

    p = sub.add_parser("eval")
    data_flags(p, defaults=False)
    p.add_argument("--checkpoint", required=True, help="run directory or model.ckpt")

    p = sub.add_parser("predict")
    data_flags(p, defaults=False)
    p.add_argument("--checkpoint", required=True, help="run directory or model.ckpt")
    p.add_argument("--window", required=True, help="input window file (T rows x N columns)")
    return parser


_RC_KEYS = {f.name for f in fields(RunConfig)}


def _overrides(ns: argparse.Namespace) -> dict:
    return {k: v for k, v in vars(ns).items() if k in _RC_KEYS and k != "command"}


def run(argv=None) -> int:
    parser = build_parser()
    ns = parser.parse_args(argv)
    logging.basicConfig(level=logging.INFO if ns.verbose else logging.WARNING, format="%(levelname)s %(message)s")
    try:
        if ns.command in ("train", "ablate"):
            rc = RunConfig.from_dict({**_overrides(ns), "command": ns.command})
            return cmd_train(rc) if ns.command == "train" else cmd_ablate(rc)
        if ns.command == "eval":
            return cmd_eval(_overrides(ns), ns.checkpoint)
        return cmd_predict(_overrides(ns), ns.checkpoint, ns.window)
    except DivergenceError as exc:
        print(f"error: {exc}", file=sys.stderr)
        return EXIT_DIVERGED
    except (CheckpointError, DimensionError, TapeStateError) as exc:
        print(f"error: {exc}", file=sys.stderr)
        return EXIT_STATE
    except (FileNotFoundError, IngestError, ConfigError, ValueError, KeyError) as exc:
        print(f"error: {exc}", file=sys.stderr)
        return EXIT_INPUT


def main() -> None:
    sys.exit(run())


if __name__ == "__main__":
    main()
