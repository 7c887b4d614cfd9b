"""Short PeMS08 run against the HA baseline (needs the external data files).

    python3 scripts/pems08_sanity.py --flows PEMS08.npz --edges PEMS08.csv --epochs 10
"""

import argparse
import logging

from mstfgrn.data import load_flow, prepare_dataset
from mstfgrn.graph import load_edge_list
from mstfgrn.model import ModelConfig
from mstfgrn.training import baseline_ha, evaluate, train


def main():
    ap = argparse.ArgumentParser(description=__doc__.splitlines()[0])
    ap.add_argument("--flows", required=True)
    ap.add_argument("--edges", required=True)
    ap.add_argument("--epochs", type=int, default=10)
    ap.add_argument("--hidden", type=int, default=64)
    ap.add_argument("--seed", type=int, default=0)
    args = ap.parse_args()
    logging.basicConfig(level=logging.INFO, format="%(message)s")

    series = load_flow(args.flows)
    graph = load_edge_list(args.edges, series.n_nodes)
    print(f"L={series.length} N={graph.n_nodes} edges={graph.n_edges}")
    ds = prepare_dataset(series, horizon=12)
    cfg = ModelConfig(n_nodes=graph.n_nodes, hidden_dim=args.hidden)
    _, params = train(cfg, ds, graph, epochs=args.epochs, seed=args.seed)
    report = evaluate(params, graph, cfg, ds.test)
    ha = baseline_ha(ds.test)
    print(report.table())
    print(f"model MAE {report.mae:.2f} vs HA {ha.mae:.2f}: {'beats' if report.mae < ha.mae else 'does not beat'} HA")


if __name__ == "__main__":
    main()
