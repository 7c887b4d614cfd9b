"""Full model vs the four ablation variants and the plain GRU, one seed, one corpus.

    python3 scripts/ablation.py --hidden 16 --epochs 30 --seeds 7 8 9
"""

import argparse

import numpy as np

from mstfgrn.data import gen_synthetic, prepare_dataset
from mstfgrn.model import ModelConfig
from mstfgrn.training import VARIANTS, ablation_factory, baseline_ha, evaluate, gru_baseline_config, train


def main():
    ap = argparse.ArgumentParser(description=__doc__.splitlines()[0])
    ap.add_argument("--nodes", type=int, default=8)
    ap.add_argument("--steps", type=int, default=2000)
    ap.add_argument("--hidden", type=int, default=16)
    ap.add_argument("--epochs", type=int, default=30)
    ap.add_argument("--seeds", type=int, nargs="+", default=[7])
    args = ap.parse_args()

    graph, series = gen_synthetic(args.nodes, args.steps, "ring", seed=args.seeds[0])
    ds = prepare_dataset(series, horizon=12)
    base = ModelConfig(n_nodes=args.nodes, hidden_dim=args.hidden)
    configs = {name: ablation_factory(base, name) for name in ("full",) + VARIANTS}
    configs["plain_gru"] = gru_baseline_config(base)

    rows = {}
    for name, cfg in configs.items():
        val, test = [], []
        for seed in args.seeds:
            state, params = train(cfg, ds, graph, epochs=args.epochs, seed=seed)
            val.append(state.best_val_mae)
            test.append(evaluate(params, graph, cfg, ds.test).mae)
        rows[name] = (np.mean(val), np.std(val), np.mean(test))
        print(f"{name:<22} val {rows[name][0]:.3f}±{rows[name][1]:.3f}  test {rows[name][2]:.3f}", flush=True)
    print(f"{'HA':<22} test {baseline_ha(ds.test).mae:.3f}")
    best = min(rows, key=lambda k: rows[k][0])
    print(f"lowest validation MAE: {best}")


if __name__ == "__main__":
    main()
