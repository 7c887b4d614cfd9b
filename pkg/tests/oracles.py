"""Independent reference implementations used by the test-suite.

Nothing here touches the tape: plain numpy loops against which the tape ops
and model pieces are compared.
"""

import numpy as np

from mstfgrn import tensor as tt
from mstfgrn.gradcheck import directional_check
from mstfgrn.model import forward, init_params
from mstfgrn.training import l1_loss


def sigmoid(x):
    return 1.0 / (1.0 + np.exp(-x))


def softmax_rows(a):
    e = np.exp(a - a.max(axis=-1, keepdims=True))
    return e / e.sum(axis=-1, keepdims=True)


def naive_sags_gcn(x, adjacency, emb, w_pool, b_pool):
    """Per-node loop: (x + Ã x)[n] @ W[n] + b[n]."""
    n = adjacency.shape[0]
    scores = softmax_rows(np.maximum(emb @ emb.T, 0.0)) * adjacency
    out = np.zeros(x.shape[:2] + (w_pool.shape[2],))
    for b in range(x.shape[0]):
        mixed = x[b] + scores @ x[b]
        for v in range(n):
            w = np.tensordot(emb[v], w_pool, axes=(0, 0))
            bias = emb[v] @ b_pool
            out[b, v] = mixed[v] @ w + bias
    return out


class DenseGRU:
    """Single-node recurrent cell with materialised weights.

    Update convention: h = z * h_prev + (1 - z) * candidate.
    """

    def __init__(self, wz, wr, wh, bz, br, bh):
        self.wz, self.wr, self.wh = wz, wr, wh
        self.bz, self.br, self.bh = bz, br, bh

    def step(self, x, h):
        xh = np.concatenate([x, h])
        z = sigmoid(xh @ self.wz + self.bz)
        r = sigmoid(xh @ self.wr + self.br)
        cand = np.tanh(np.concatenate([x, r * h]) @ self.wh + self.bh)
        return z * h + (1.0 - z) * cand


def materialised_gru(params, direction="fwd", node=0):
    e = params["embedding"].data[node].astype(np.float64)
    ws, bs = [], []
    for g in ("z", "r", "h"):
        ws.append(np.tensordot(e, params[f"{direction}.{g}.weight_pool"].data, axes=(0, 0)))
        bs.append(e @ params[f"{direction}.{g}.bias_pool"].data)
    return DenseGRU(*ws, *bs)


def model_fd_trial(cfg, graph, dtype, trial, batch=2):
    """Directional FD check of the L1 loss w.r.t. every named parameter.

    Parameters are widened beyond their init scale so no gradient is
    vanishingly small, and targets sit 0.5 to 1.5 away from the prediction so
    the L1 kink is never within a step.
    """
    rng = np.random.default_rng(trial)
    p = init_params(cfg, rng, dtype=dtype)
    for _, t in p.items():
        t.data = (t.data + 0.3 * rng.standard_normal(t.shape)).astype(dtype)
    x = tt.Tensor(rng.standard_normal((batch, cfg.horizon, cfg.n_nodes, cfg.input_dim)), dtype=dtype)
    with tt.no_grad():
        y0 = forward(x, graph, p, cfg).data
    offset = np.sign(rng.standard_normal(y0.shape)) * rng.uniform(0.5, 1.5, y0.shape)
    target = tt.Tensor(y0 + offset, dtype=dtype)
    inputs = [t for _, t in p.items()]
    return directional_check(lambda: l1_loss(forward(x, graph, p, cfg), target), inputs, rng)
