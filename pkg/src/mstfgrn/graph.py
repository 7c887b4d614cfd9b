"""Road-network graphs and the learned weighted adjacency."""

from __future__ import annotations

import csv
import logging
import math
from dataclasses import dataclass, field
from pathlib import Path
from typing import Sequence

import numpy as np

from . import tensor as tt
from .tensor import DimensionError, Tensor

log = logging.getLogger(__name__)


class IngestError(ValueError):
    """A data file could not be parsed."""


@dataclass(frozen=True)
class Graph:
    n_nodes: int
    adjacency: np.ndarray
    node_ids: tuple | None = None
    weights: np.ndarray | None = field(default=None, compare=False, repr=False)

    def __post_init__(self):
        a = np.asarray(self.adjacency)
        n = self.n_nodes
        if n < 1 or a.shape != (n, n):
            raise DimensionError(f"adjacency shape {a.shape} does not match n_nodes={n}")
        if not np.isin(a, (0, 1)).all():
            raise ValueError("adjacency entries must be 0 or 1")
        if not (a == a.T).all():
            raise ValueError("adjacency must be symmetric")
        if np.diag(a).any():
            raise ValueError("stored adjacency must have a zero diagonal")
        a = a.astype(np.uint8)
        a.setflags(write=False)
        object.__setattr__(self, "adjacency", a)
        if self.node_ids is not None and len(self.node_ids) != n:
            raise DimensionError(f"{len(self.node_ids)} node ids for {n} nodes")

    @property
    def n_edges(self) -> int:
        return int(np.triu(self.adjacency).sum())

    def permuted(self, perm: Sequence[int]) -> "Graph":
        """Graph with node ``i`` of the result being node ``perm[i]`` of this one."""
        p = np.asarray(perm)
        ids = None if self.node_ids is None else tuple(self.node_ids[i] for i in p)
        return Graph(self.n_nodes, self.adjacency[np.ix_(p, p)], ids)


def from_edges(n_nodes: int, edges, node_ids=None) -> Graph:
    a = np.zeros((n_nodes, n_nodes), dtype=np.uint8)
    for i, j in edges:
        if i != j:
            a[i, j] = a[j, i] = 1
    return Graph(n_nodes, a, node_ids)


def ring_graph(n: int) -> Graph:
    if n < 3:
        return from_edges(n, [(i, i + 1) for i in range(n - 1)])
    return from_edges(n, [(i, (i + 1) % n) for i in range(n)])


def grid_graph(n: int) -> Graph:
    """Near-square 4-neighbour lattice over ``n`` nodes, filled row-major."""
    cols = math.ceil(math.sqrt(n))
    edges = []
    for i in range(n):
        r, c = divmod(i, cols)
        if c + 1 < cols and i + 1 < n:
            edges.append((i, i + 1))
        if i + cols < n:
            edges.append((i, i + cols))
    return from_edges(n, edges)


def erdos_graph(n: int, p: float, rng: np.random.Generator) -> Graph:
    upper = np.triu(rng.random((n, n)) < p, k=1)
    a = (upper | upper.T).astype(np.uint8)
    return Graph(n, a)


def _is_number(s: str) -> bool:
    try:
        float(s)
    except ValueError:
        return False
    return True


def load_edge_list(path, n_nodes: int, node_ids: Sequence | None = None) -> Graph:
    """Read a ``from,to,cost`` CSV into a symmetric binary graph.

    When ``node_ids`` is given, the ``from``/``to`` fields are external sensor
    ids and are remapped to their position in ``node_ids``. Costs are kept as
    symmetric edge weights.
    """
    path = Path(path)
    index = None
    if node_ids is not None:
        index = {str(s).strip(): k for k, s in enumerate(node_ids)}
        if len(index) != n_nodes:
            raise IngestError(f"{len(index)} distinct node ids for n_nodes={n_nodes}")
    a = np.zeros((n_nodes, n_nodes), dtype=np.uint8)
    w = np.zeros((n_nodes, n_nodes), dtype=np.float64)
    with path.open(newline="", encoding="utf-8") as fh:
        for lineno, row in enumerate(csv.reader(fh), start=1):
            if not row or all(not c.strip() for c in row):
                continue
            if lineno == 1 and not _is_number(row[0].strip()):
                continue
            if len(row) < 2:
                raise IngestError(f"{path}:{lineno}: expected from,to[,cost], got {row!r}")
            src, dst = row[0].strip(), row[1].strip()
            try:
                if index is not None:
                    i, j = index[src], index[dst]
                else:
                    i, j = int(float(src)), int(float(dst))
            except (KeyError, ValueError):
                raise IngestError(f"{path}:{lineno}: unknown node in {row!r}") from None
            if not (0 <= i < n_nodes and 0 <= j < n_nodes):
                raise IngestError(f"{path}:{lineno}: node index out of range [0, {n_nodes}) in {row!r}")
            if i == j:
                log.warning("%s:%d: self-loop on node %d ignored", path, lineno, i)
                continue
            a[i, j] = a[j, i] = 1
            if len(row) > 2 and row[2].strip():
                cost = float(row[2])
                w[i, j] = w[j, i] = cost
    ids = tuple(node_ids) if node_ids is not None else None
    return Graph(n_nodes, a, ids, weights=w)


def read_node_ids(path) -> list[str]:
    with Path(path).open(encoding="utf-8") as fh:
        return [line.strip() for line in fh if line.strip()]


def write_id_map(graph: Graph, path) -> None:
    """Emit the ``index,node_id`` remapping table for non-contiguous sensor ids."""
    if graph.node_ids is None:
        raise ValueError("graph has no external node ids")
    with Path(path).open("w", newline="", encoding="utf-8") as fh:
        wr = csv.writer(fh)
        wr.writerow(["index", "node_id"])
        for k, nid in enumerate(graph.node_ids):
            wr.writerow([k, nid])


def write_edge_list(graph: Graph, path) -> None:
    with Path(path).open("w", newline="", encoding="utf-8") as fh:
        wr = csv.writer(fh)
        wr.writerow(["from", "to", "cost"])
        for i, j in zip(*np.nonzero(np.triu(graph.adjacency))):
            cost = 1.0 if graph.weights is None else graph.weights[i, j]
            wr.writerow([int(i), int(j), cost])


def adjacency_tensor(graph: Graph) -> Tensor:
    return Tensor(graph.adjacency)


def row_normalized(graph: Graph) -> np.ndarray:
    a = graph.adjacency.astype(np.float64)
    deg = a.sum(axis=1, keepdims=True)
    return np.divide(a, deg, out=np.zeros_like(a), where=deg > 0)


def sagsam(embedding: Tensor, graph: Graph, combine: str = "mask") -> Tensor:
    """Weighted adjacency ``softmax(relu(E E^T))`` combined with the predefined graph.

    ``combine="mask"`` keeps only the entries on edges of ``graph``;
    ``combine="matmul"`` right-multiplies by the adjacency matrix instead, and
    ``combine="none"`` drops the predefined graph altogether.
    """
    if embedding.ndim != 2 or embedding.shape[0] != graph.n_nodes:
        raise DimensionError(
            f"sagsam: embedding {embedding.shape} has wrong row count for N={graph.n_nodes}"
        )
    scores = tt.softmax_rows(tt.relu(tt.matmul(embedding, tt.transpose(embedding))))
    if combine == "none":
        return scores
    a = Tensor(graph.adjacency, dtype=embedding.dtype)
    if combine == "mask":
        return tt.mul(scores, a)
    if combine == "matmul":
        return tt.matmul(scores, a)
    raise ValueError(f"unknown adjacency combine mode {combine!r}")


def augmented_operator(weighted: Tensor) -> Tensor:
    """``I_N + weighted``: the self-loop-augmented propagation operator."""
    if weighted.ndim != 2 or weighted.shape[0] != weighted.shape[1]:
        raise DimensionError(f"augmented_operator: need a square matrix, got {weighted.shape}")
    return tt.add(weighted, np.eye(weighted.shape[0], dtype=weighted.dtype))
