"""The forecasting network: graph-gated bidirectional recurrence, per-node
temporal attention and a multi-step linear head."""

from __future__ import annotations

import json
import math
import struct
from collections import OrderedDict
from dataclasses import asdict, dataclass, fields, replace
from pathlib import Path
from typing import Iterator

import numpy as np

from . import tensor as tt
from .graph import Graph, augmented_operator, row_normalized, sagsam
from .tensor import DimensionError, Tensor

ADJACENCY_MODES = ("semi_autonomous", "predefined_only", "adaptive_only", "none")
GATES = ("z", "r", "h")


@dataclass(frozen=True)
class ModelConfig:
    n_nodes: int
    input_dim: int = 1
    hidden_dim: int = 64
    embed_dim: int = 10
    horizon: int = 12
    gcn_layers: int = 1
    use_reverse: bool = True
    use_attention: bool = True
    adjacency_mode: str = "semi_autonomous"
    adjacency_combine: str = "mask"
    head: str = "flatten"
    key_dim: int | None = None
    ln_eps: float = 1e-5

    def __post_init__(self):
        for name in ("n_nodes", "input_dim", "hidden_dim", "embed_dim", "horizon", "gcn_layers"):
            if getattr(self, name) < 1:
                raise ValueError(f"{name} must be positive, got {getattr(self, name)}")
        if self.adjacency_mode not in ADJACENCY_MODES:
            raise ValueError(f"unknown adjacency_mode {self.adjacency_mode!r}")
        if self.adjacency_combine not in ("mask", "matmul"):
            raise ValueError(f"unknown adjacency_combine {self.adjacency_combine!r}")
        if self.head not in ("flatten", "per_step"):
            raise ValueError(f"unknown head {self.head!r}")

    @property
    def uses_embedding(self) -> bool:
        return self.adjacency_mode in ("semi_autonomous", "adaptive_only")

    @property
    def feature_dim(self) -> int:
        """Width of the encoder output fed to attention and the head."""
        return self.hidden_dim * (2 if self.use_reverse else 1)

    @property
    def attn_key_dim(self) -> int:
        return self.key_dim or self.feature_dim

    @property
    def directions(self) -> tuple[str, ...]:
        return ("fwd", "rev") if self.use_reverse else ("fwd",)

    def to_dict(self) -> dict:
        return asdict(self)

    @classmethod
    def from_dict(cls, d: dict) -> "ModelConfig":
        known = {f.name for f in fields(cls)}
        return cls(**{k: v for k, v in d.items() if k in known})

    def replace(self, **kw) -> "ModelConfig":
        return replace(self, **kw)


class ModelParams:
    """Named, ordered collection of every learnable tensor."""

    def __init__(self, tensors: "OrderedDict[str, Tensor]"):
        self._t = tensors
        for name, t in tensors.items():
            t.name = name
            t.requires_grad = True

    def __getitem__(self, name: str) -> Tensor:
        return self._t[name]

    def __contains__(self, name: str) -> bool:
        return name in self._t

    def __iter__(self) -> Iterator[str]:
        return iter(self._t)

    def __len__(self) -> int:
        return len(self._t)

    def get(self, name: str) -> Tensor | None:
        return self._t.get(name)

    def items(self):
        return self._t.items()

    def names(self) -> list[str]:
        return list(self._t)

    def count(self) -> int:
        return sum(t.data.size for t in self._t.values())

    def shapes(self) -> dict[str, tuple]:
        return {k: t.shape for k, t in self._t.items()}

    def zero_grad(self) -> None:
        for t in self._t.values():
            t.grad = None

    def arrays(self) -> "OrderedDict[str, np.ndarray]":
        return OrderedDict((k, t.data.copy()) for k, t in self._t.items())

    def load_arrays(self, arrays: dict) -> None:
        mine, theirs = set(self._t), set(arrays)
        if mine != theirs:
            missing = sorted(mine - theirs)
            extra = sorted(theirs - mine)
            raise CheckpointError(f"parameter names differ: missing {missing}, unexpected {extra}")
        for k, t in self._t.items():
            a = np.asarray(arrays[k])
            if a.shape != t.shape:
                raise CheckpointError(f"parameter {k}: checkpoint shape {a.shape} != model shape {t.shape}")
            t.data = a.astype(t.dtype).copy()

    def astype(self, dtype) -> "ModelParams":
        return ModelParams(OrderedDict((k, Tensor(t.data, dtype=dtype)) for k, t in self._t.items()))


def _xavier(rng, fan_in, fan_out, shape=None):
    lim = math.sqrt(6.0 / (fan_in + fan_out))
    return rng.uniform(-lim, lim, size=shape or (fan_in, fan_out))


def param_shapes(cfg: ModelConfig) -> "OrderedDict[str, tuple]":
    n, c, f, d, t = cfg.n_nodes, cfg.input_dim, cfg.hidden_dim, cfg.embed_dim, cfg.horizon
    shapes: OrderedDict[str, tuple] = OrderedDict()
    if cfg.uses_embedding:
        shapes["embedding"] = (n, d)
    for direction in cfg.directions:
        for g in GATES:
            if cfg.uses_embedding:
                shapes[f"{direction}.{g}.weight_pool"] = (d, c + f, f)
                shapes[f"{direction}.{g}.bias_pool"] = (d, f)
            else:
                shapes[f"{direction}.{g}.weight"] = (c + f, f)
                shapes[f"{direction}.{g}.bias"] = (f,)
    D, dk = cfg.feature_dim, cfg.attn_key_dim
    if cfg.use_attention:
        shapes["attn.q.weight"] = (D, dk)
        shapes["attn.q.bias"] = (dk,)
        shapes["attn.k.weight"] = (D, dk)
        shapes["attn.k.bias"] = (dk,)
        shapes["attn.v.weight"] = (D, D)
        shapes["attn.v.bias"] = (D,)
        shapes["norm.gain"] = (D,)
        shapes["norm.bias"] = (D,)
    if cfg.head == "flatten":
        shapes["head.weight"] = (t * D, t)
        shapes["head.bias"] = (t,)
    else:
        shapes["head.weight"] = (D, 1)
        shapes["head.bias"] = (1,)
    return shapes


def init_params(cfg: ModelConfig, rng: np.random.Generator, dtype=None) -> ModelParams:
    out: OrderedDict[str, Tensor] = OrderedDict()
    fan_in = cfg.input_dim + cfg.hidden_dim
    for name, shape in param_shapes(cfg).items():
        if name == "embedding":
            a = rng.normal(0.0, 0.1, size=shape)
        elif name.endswith("weight_pool"):
            lim = 1.0 / math.sqrt(cfg.embed_dim * fan_in)
            a = rng.uniform(-lim, lim, size=shape)
        elif name.startswith(("fwd.", "rev.")) and name.endswith(".weight"):
            lim = 1.0 / math.sqrt(fan_in)
            a = rng.uniform(-lim, lim, size=shape)
        elif name == "norm.gain":
            a = np.ones(shape)
        elif name.endswith("weight"):
            a = _xavier(rng, shape[0], shape[1])
        else:
            a = np.zeros(shape)
        out[name] = Tensor(a, dtype=dtype)
    return ModelParams(out)


def zero_params(cfg: ModelConfig, dtype=None) -> ModelParams:
    return ModelParams(OrderedDict((k, Tensor(np.zeros(s), dtype=dtype)) for k, s in param_shapes(cfg).items()))


def check_params(params: ModelParams, cfg: ModelConfig) -> None:
    expected = param_shapes(cfg)
    got = params.shapes()
    if list(expected) != list(got) or any(expected[k] != got[k] for k in expected):
        raise DimensionError("parameters do not match the model configuration")


# graph convolution


def propagation_operator(params: ModelParams, graph: Graph, cfg: ModelConfig, dtype=None) -> Tensor:
    """The [N, N] operator applied before the node-wise contraction."""
    if graph.n_nodes != cfg.n_nodes:
        raise DimensionError(f"graph has {graph.n_nodes} nodes, config expects {cfg.n_nodes}")
    dtype = dtype or (params["embedding"].dtype if "embedding" in params else tt.get_dtype())
    mode = cfg.adjacency_mode
    if mode == "semi_autonomous":
        return augmented_operator(sagsam(params["embedding"], graph, cfg.adjacency_combine))
    if mode == "adaptive_only":
        return augmented_operator(sagsam(params["embedding"], graph, "none"))
    n = graph.n_nodes
    if mode == "predefined_only":
        return Tensor(np.eye(n) + row_normalized(graph), dtype=dtype)
    return Tensor(np.eye(n), dtype=dtype)


def gcn_apply(x: Tensor, prop: Tensor, weight: Tensor, bias: Tensor, layers: int = 1) -> Tensor:
    """``(prop^layers x) W + b`` with per-node ([N,C,F]) or shared ([C,F]) weights."""
    if x.ndim != 3:
        raise DimensionError(f"gcn input must be [B,N,C], got {x.shape}")
    for _ in range(layers):
        x = tt.node_mix(prop, x)
    if weight.ndim == 3:
        out = tt.batched_node_contract(x, weight)
    else:
        out = tt.linear(x, weight)
    if bias.shape != out.shape:
        bias = tt.broadcast_to(bias, out.shape)
    return tt.add(out, bias)


def sags_gcn(
    x: Tensor,
    graph: Graph,
    embedding: Tensor,
    weight_pool: Tensor,
    bias_pool: Tensor,
    *,
    combine: str = "mask",
    layers: int = 1,
) -> Tensor:
    """One graph convolution with node-adaptive weights drawn from shared pools.

    x: [B, N, Cin]; weight_pool: [d, Cin, Fout]; bias_pool: [d, Fout].
    """
    if weight_pool.ndim != 3 or weight_pool.shape[1] != x.shape[-1]:
        raise DimensionError(f"weight pool {weight_pool.shape} does not match input {x.shape}")
    if bias_pool.shape != (weight_pool.shape[0], weight_pool.shape[2]):
        raise DimensionError(f"bias pool {bias_pool.shape} does not match weight pool {weight_pool.shape}")
    prop = augmented_operator(sagsam(embedding, graph, combine))
    w = tt.embed_pool(embedding, weight_pool)
    b = tt.embed_pool(embedding, bias_pool)
    return gcn_apply(x, prop, w, b, layers)


@dataclass
class CellWeights:
    """Per-forward materialised weights of one recurrent direction."""

    prop: Tensor
    layers: int
    w_zr: Tensor
    b_zr: Tensor
    w_h: Tensor
    b_h: Tensor
    hidden: int


def cell_weights(params: ModelParams, cfg: ModelConfig, direction: str, prop: Tensor) -> CellWeights:
    ws, bs = {}, {}
    for g in GATES:
        if cfg.uses_embedding:
            e = params["embedding"]
            ws[g] = tt.embed_pool(e, params[f"{direction}.{g}.weight_pool"])
            bs[g] = tt.embed_pool(e, params[f"{direction}.{g}.bias_pool"])
        else:
            ws[g] = params[f"{direction}.{g}.weight"]
            bs[g] = params[f"{direction}.{g}.bias"]
    # z and r read the same input, so their contractions are fused
    return CellWeights(
        prop=prop,
        layers=cfg.gcn_layers,
        w_zr=tt.concat_last(ws["z"], ws["r"]),
        b_zr=tt.concat_last(bs["z"], bs["r"]),
        w_h=ws["h"],
        b_h=bs["h"],
        hidden=cfg.hidden_dim,
    )


def cell_step(x_t: Tensor, h_prev: Tensor, cw: CellWeights) -> Tensor:
    f = cw.hidden
    gates = tt.sigmoid(gcn_apply(tt.concat_last(x_t, h_prev), cw.prop, cw.w_zr, cw.b_zr, cw.layers))
    z, r = tt.split_last(gates, f)
    cand_in = tt.concat_last(x_t, tt.mul(r, h_prev))
    cand = tt.tanh(gcn_apply(cand_in, cw.prop, cw.w_h, cw.b_h, cw.layers))
    # h = z*h_prev + (1-z)*cand, written as cand + z*(h_prev - cand)
    return tt.add(cand, tt.mul(z, tt.sub(h_prev, cand)))


def stfgrn_cell(
    x_t: Tensor,
    h_prev: Tensor,
    params: ModelParams,
    graph: Graph,
    cfg: ModelConfig,
    direction: str = "fwd",
) -> Tensor:
    """One recurrent step: x_t [B,N,C], h_prev [B,N,F'] -> h_t [B,N,F']."""
    if x_t.shape[-1] != cfg.input_dim or h_prev.shape[-1] != cfg.hidden_dim or x_t.shape[:2] != h_prev.shape[:2]:
        raise DimensionError(f"cell inputs {x_t.shape} / {h_prev.shape} do not match config")
    prop = propagation_operator(params, graph, cfg, x_t.dtype)
    return cell_step(x_t, h_prev, cell_weights(params, cfg, direction, prop))


def _run_direction(steps: list[Tensor], cw: CellWeights, reverse: bool) -> list[Tensor]:
    b, n = steps[0].shape[:2]
    h = Tensor(np.zeros((b, n, cw.hidden)), dtype=steps[0].dtype)
    order = range(len(steps) - 1, -1, -1) if reverse else range(len(steps))
    outs: list[Tensor | None] = [None] * len(steps)
    for t in order:
        h = cell_step(steps[t], h, cw)
        outs[t] = h
    return outs


def encode_bidirectional(
    x: Tensor, params: ModelParams, graph: Graph, cfg: ModelConfig, prop: Tensor | None = None
) -> Tensor:
    """x [B,T,N,C] -> H [B,N,T,F'] or [B,N,T,2F'] (forward half first)."""
    if x.ndim != 4 or x.shape[2] != cfg.n_nodes or x.shape[3] != cfg.input_dim:
        raise DimensionError(f"input must be [B,T,{cfg.n_nodes},{cfg.input_dim}], got {x.shape}")
    if prop is None:
        prop = propagation_operator(params, graph, cfg, x.dtype)
    steps = [tt.index_axis(x, 1, t) for t in range(x.shape[1])]
    halves = []
    for direction in cfg.directions:
        cw = cell_weights(params, cfg, direction, prop)
        outs = _run_direction(steps, cw, reverse=(direction == "rev"))
        halves.append(tt.stack(outs, axis=2))
    if len(halves) == 1:
        return halves[0]
    return tt.concat_last(halves[0], halves[1])


def attention_scores(h: Tensor, params: ModelParams, cfg: ModelConfig) -> Tensor:
    q = tt.linear(h, params["attn.q.weight"], params["attn.q.bias"])
    k = tt.linear(h, params["attn.k.weight"], params["attn.k.bias"])
    logits = tt.matmul(q, tt.transpose(k, (0, 1, 3, 2)))
    return tt.softmax_rows(tt.mul(logits, 1.0 / math.sqrt(cfg.attn_key_dim)))


def global_attention(h: Tensor, params: ModelParams, cfg: ModelConfig) -> Tensor:
    """Per-node scaled dot-product self-attention over time, then residual + layer norm."""
    scores = attention_scores(h, params, cfg)
    v = tt.linear(h, params["attn.v.weight"], params["attn.v.bias"])
    attended = tt.matmul(scores, v)
    return tt.layer_norm(tt.add(attended, h), params["norm.gain"], params["norm.bias"], cfg.ln_eps)


def predict_head(h: Tensor, params: ModelParams, cfg: ModelConfig) -> Tensor:
    b, n, t, d = h.shape
    if cfg.head == "flatten":
        flat = tt.reshape(h, (b, n, t * d))
        out = tt.linear(flat, params["head.weight"], params["head.bias"])
        return tt.reshape(out, (b, n, cfg.horizon, 1))
    return tt.linear(h, params["head.weight"], params["head.bias"])


def forward(x: Tensor, graph: Graph, params: ModelParams, cfg: ModelConfig) -> Tensor:
    """Normalised input windows [B,T,N,C] -> normalised forecasts [B,N,T,1]."""
    if x.shape[1] != cfg.horizon:
        raise DimensionError(f"input window length {x.shape[1]} != horizon {cfg.horizon}")
    h = encode_bidirectional(x, params, graph, cfg)
    if cfg.use_attention:
        h = global_attention(h, params, cfg)
    return predict_head(h, params, cfg)


# checkpoints

MAGIC = b"MSTF"
FORMAT_VERSION = 1
_DT_CODES = {np.dtype("<f4"): 0, np.dtype("<f8"): 1}
_CODE_DT = {v: k for k, v in _DT_CODES.items()}


class CheckpointError(ValueError):
    """Checkpoint file is malformed or incompatible with the model."""


def save_checkpoint(path, params: ModelParams, cfg: ModelConfig, extra: dict | None = None) -> None:
    """Write parameters to ``path`` and the config to ``path`` with a ``.json`` suffix.

    Layout: magic, u32 version, u32 entry count, then per entry
    (u16 name length, utf-8 name, u8 dtype code, u8 ndim, u32 extents),
    followed by the little-endian payloads in manifest order.
    """
    path = Path(path)
    head = bytearray(MAGIC)
    head += struct.pack("<II", FORMAT_VERSION, len(params))
    payloads = []
    for name, t in params.items():
        a = np.ascontiguousarray(t.data, dtype=t.data.dtype.newbyteorder("<"))
        raw = name.encode("utf-8")
        head += struct.pack("<H", len(raw)) + raw
        head += struct.pack("<BB", _DT_CODES[a.dtype], a.ndim)
        head += struct.pack(f"<{a.ndim}I", *a.shape)
        payloads.append(a.tobytes())
    with path.open("wb") as fh:
        fh.write(bytes(head))
        for p in payloads:
            fh.write(p)
    doc = {"format_version": FORMAT_VERSION, "model": cfg.to_dict()}
    if extra:
        doc.update(extra)
    path.with_suffix(".json").write_text(json.dumps(doc, indent=2, sort_keys=True))


def read_checkpoint(path) -> "OrderedDict[str, np.ndarray]":
    buf = Path(path).read_bytes()
    if buf[:4] != MAGIC:
        raise CheckpointError(f"{path}: not a checkpoint (bad magic)")
    version, count = struct.unpack_from("<II", buf, 4)
    if version != FORMAT_VERSION:
        raise CheckpointError(f"{path}: format version {version}, expected {FORMAT_VERSION}")
    off = 12
    manifest = []
    for _ in range(count):
        (ln,) = struct.unpack_from("<H", buf, off)
        off += 2
        name = buf[off:off + ln].decode("utf-8")
        off += ln
        code, ndim = struct.unpack_from("<BB", buf, off)
        off += 2
        shape = struct.unpack_from(f"<{ndim}I", buf, off)
        off += 4 * ndim
        if code not in _CODE_DT:
            raise CheckpointError(f"{path}: unknown dtype code {code} for {name}")
        manifest.append((name, _CODE_DT[code], shape))
    out: OrderedDict[str, np.ndarray] = OrderedDict()
    for name, dt, shape in manifest:
        nbytes = dt.itemsize * int(np.prod(shape, dtype=np.int64))
        if off + nbytes > len(buf):
            raise CheckpointError(f"{path}: truncated payload for {name}")
        out[name] = np.frombuffer(buf, dtype=dt, count=nbytes // dt.itemsize, offset=off).reshape(shape).copy()
        off += nbytes
    if off != len(buf):
        raise CheckpointError(f"{path}: {len(buf) - off} trailing bytes")
    return out


def read_checkpoint_config(path) -> dict:
    return json.loads(Path(path).with_suffix(".json").read_text())


def load_checkpoint(path, cfg: ModelConfig, dtype=None) -> ModelParams:
    """Build parameters for ``cfg`` and fill them from ``path``; rejects any mismatch."""
    params = zero_params(cfg, dtype=dtype)
    params.load_arrays(read_checkpoint(path))
    return params
