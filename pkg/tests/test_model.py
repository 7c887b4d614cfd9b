import struct

import numpy as np
import pytest
from hypothesis import given, settings
from hypothesis import strategies as st

from mstfgrn import tensor as tt
from mstfgrn.gradcheck import RTOL
from mstfgrn.graph import Graph, erdos_graph, from_edges, ring_graph
from mstfgrn.model import (
    CheckpointError,
    ModelConfig,
    attention_scores,
    check_params,
    encode_bidirectional,
    forward,
    global_attention,
    init_params,
    load_checkpoint,
    predict_head,
    read_checkpoint,
    read_checkpoint_config,
    save_checkpoint,
    sags_gcn,
    stfgrn_cell,
    zero_params,
)
from mstfgrn.tensor import DimensionError, Tensor

from oracles import materialised_gru, model_fd_trial, naive_sags_gcn

F64 = np.float64


def T(a):
    return Tensor(np.asarray(a, dtype=F64), dtype=F64)


def params_for(cfg, seed=0, dtype=F64, widen=0.0):
    rng = np.random.default_rng(seed)
    p = init_params(cfg, rng, dtype=dtype)
    if widen:
        for _, t in p.items():
            t.data = (t.data + widen * rng.standard_normal(t.shape)).astype(dtype)
    return p


ONE = Graph(1, np.zeros((1, 1)))


class TestConfig:
    def test_defaults(self):
        cfg = ModelConfig(n_nodes=5)
        assert (cfg.hidden_dim, cfg.embed_dim, cfg.horizon) == (64, 10, 12)
        assert cfg.feature_dim == 128 and cfg.attn_key_dim == 128

    def test_round_trip(self):
        cfg = ModelConfig(n_nodes=3, head="per_step", use_reverse=False)
        assert ModelConfig.from_dict(cfg.to_dict()) == cfg

    @pytest.mark.parametrize("kw", [{"hidden_dim": 0}, {"adjacency_mode": "both"}, {"head": "conv"}])
    def test_invalid(self, kw):
        with pytest.raises(ValueError):
            ModelConfig(n_nodes=3, **kw)

    def test_param_names_unique(self, small_cfg):
        names = init_params(small_cfg, np.random.default_rng(0)).names()
        assert len(names) == len(set(names))
        assert "rev.z.weight_pool" in names and "attn.v.weight" in names

    def test_check_params(self, small_cfg):
        p = init_params(small_cfg, np.random.default_rng(0))
        check_params(p, small_cfg)
        with pytest.raises(DimensionError):
            check_params(p, small_cfg.replace(hidden_dim=4))


class TestSagsGcn:
    def test_identity(self):
        out = sags_gcn(T([[[5.0]]]), ONE, T([[1.0]]), T([[[1.0]]]), T([[0.0]]))
        np.testing.assert_array_equal(out.data, [[[5.0]]])

    def test_zero_embedding(self):
        rng = np.random.default_rng(0)
        out = sags_gcn(T(rng.normal(size=(2, 4, 3))), ring_graph(4), T(np.zeros((4, 2))),
                       T(rng.normal(size=(2, 3, 5))), T(rng.normal(size=(2, 5))))
        np.testing.assert_array_equal(out.data, np.zeros((2, 4, 5)))

    @pytest.mark.parametrize("seed", range(5))
    def test_naive_loop(self, seed):
        rng = np.random.default_rng(seed)
        g = erdos_graph(5, 0.5, rng)
        x, e = rng.normal(size=(2, 5, 3)), rng.normal(size=(5, 4))
        wp, bp = rng.normal(size=(4, 3, 6)), rng.normal(size=(4, 6))
        out = sags_gcn(T(x), g, T(e), T(wp), T(bp)).data
        assert np.abs(out - naive_sags_gcn(x, g.adjacency, e, wp, bp)).max() < 1e-5

    def test_pool_mismatch(self):
        with pytest.raises(DimensionError):
            sags_gcn(T(np.ones((1, 2, 3))), ring_graph(2), T(np.ones((2, 2))), T(np.ones((2, 4, 5))), T(np.ones((2, 5))))


class TestCell:
    cfg = ModelConfig(n_nodes=3, horizon=2, hidden_dim=4, embed_dim=2)

    def _forced(self, z_bias):
        p = params_for(self.cfg, 1)
        p["embedding"].data[:] = 1.0
        p["fwd.z.bias_pool"].data[:] = z_bias / self.cfg.embed_dim
        return p

    def test_saturated_keep(self):
        rng = np.random.default_rng(0)
        p = self._forced(40.0)
        h_prev = T(rng.uniform(-1, 1, size=(2, 3, 4)))
        out = stfgrn_cell(T(rng.normal(size=(2, 3, 1))), h_prev, p, ring_graph(3), self.cfg)
        assert np.abs(out.data - h_prev.data).max() < 1e-3

    def test_saturated_replace(self):
        rng = np.random.default_rng(1)
        p = self._forced(-40.0)
        g = ring_graph(3)
        x = T(rng.normal(size=(2, 3, 1)))
        out = stfgrn_cell(x, T(np.zeros((2, 3, 4))), p, g, self.cfg)
        cand_in = T(np.concatenate([x.data, np.zeros((2, 3, 4))], axis=-1))
        pre = sags_gcn(cand_in, g, p["embedding"], p["fwd.h.weight_pool"], p["fwd.h.bias_pool"])
        np.testing.assert_allclose(out.data, np.tanh(pre.data), atol=1e-12)

    def test_dense_gru_oracle(self):
        cfg = ModelConfig(n_nodes=1, horizon=1, hidden_dim=6, embed_dim=3, input_dim=2)
        p = params_for(cfg, 3, widen=0.5)
        ref = materialised_gru(p)
        rng = np.random.default_rng(4)
        h_ref = np.zeros(6)
        h = T(np.zeros((1, 1, 6)))
        worst = 0.0
        for _ in range(50):
            x = rng.normal(size=2)
            h_ref = ref.step(x, h_ref)
            h = stfgrn_cell(T(x.reshape(1, 1, 2)), h, p, ONE, cfg)
            worst = max(worst, np.abs(h.data.reshape(-1) - h_ref).max())
        assert worst < 1e-6

    @settings(max_examples=25, deadline=None)
    @given(st.integers(0, 2**31 - 1), st.floats(0.1, 5.0))
    def test_hidden_bounded(self, seed, scale):
        rng = np.random.default_rng(seed)
        p = params_for(self.cfg, seed % 1000, widen=1.0)
        h_prev = rng.uniform(-scale, scale, size=(1, 3, 4))
        out = stfgrn_cell(T(rng.normal(size=(1, 3, 1)) * 10), T(h_prev), p, ring_graph(3), self.cfg).data
        bound = np.maximum(np.abs(h_prev), 1.0)
        assert (np.abs(out) <= bound + 1e-12).all()

    def test_shape_error(self):
        p = params_for(self.cfg)
        with pytest.raises(DimensionError):
            stfgrn_cell(T(np.zeros((1, 3, 2))), T(np.zeros((1, 3, 4))), p, ring_graph(3), self.cfg)


class TestEncoder:
    cfg = ModelConfig(n_nodes=4, horizon=5, hidden_dim=3, embed_dim=2)
    graph = from_edges(4, [(0, 1), (1, 2), (2, 3)])

    def test_single_step_width(self):
        cfg = self.cfg.replace(horizon=1)
        p = params_for(cfg)
        for g in ("z", "r", "h"):
            for kind in ("weight_pool", "bias_pool"):
                p[f"rev.{g}.{kind}"].data = p[f"fwd.{g}.{kind}"].data.copy()
        out = encode_bidirectional(T(np.random.default_rng(0).normal(size=(2, 1, 4, 1))), p, self.graph, cfg).data
        assert out.shape == (2, 4, 1, 6)
        np.testing.assert_array_equal(out[..., :3], out[..., 3:])

    def test_forward_only_width(self):
        cfg = self.cfg.replace(use_reverse=False)
        out = encode_bidirectional(T(np.zeros((1, 5, 4, 1))), params_for(cfg), self.graph, cfg)
        assert out.shape == (1, 4, 5, 3)

    def test_swap_symmetry(self):
        p = params_for(self.cfg, 2, widen=0.3)
        x = np.random.default_rng(5).normal(size=(2, 5, 4, 1))
        out = encode_bidirectional(T(x), p, self.graph, self.cfg).data
        q = params_for(self.cfg, 2, widen=0.3)
        for g in ("z", "r", "h"):
            for kind in ("weight_pool", "bias_pool"):
                q[f"fwd.{g}.{kind}"].data = p[f"rev.{g}.{kind}"].data.copy()
                q[f"rev.{g}.{kind}"].data = p[f"fwd.{g}.{kind}"].data.copy()
        swapped = encode_bidirectional(T(x[:, ::-1]), q, self.graph, self.cfg).data
        np.testing.assert_allclose(swapped[..., :3], out[:, :, ::-1, 3:], atol=1e-12)
        np.testing.assert_allclose(swapped[..., 3:], out[:, :, ::-1, :3], atol=1e-12)

    def test_batch_consistency(self):
        p = params_for(self.cfg, 3)
        x = np.random.default_rng(6).normal(size=(2, 5, 4, 1))
        both = encode_bidirectional(T(x), p, self.graph, self.cfg).data
        for b in range(2):
            one = encode_bidirectional(T(x[b:b + 1]), p, self.graph, self.cfg).data
            assert np.abs(both[b:b + 1] - one).max() < 1e-6


class TestAttention:
    cfg = ModelConfig(n_nodes=3, horizon=4, hidden_dim=2, embed_dim=2)

    def test_single_step(self):
        cfg = self.cfg.replace(horizon=1)
        p = params_for(cfg, widen=0.5)
        h = T(np.random.default_rng(0).normal(size=(2, 3, 1, 4)))
        np.testing.assert_array_equal(attention_scores(h, p, cfg).data, np.ones((2, 3, 1, 1)))
        v = h.data @ p["attn.v.weight"].data + p["attn.v.bias"].data
        ref = tt.layer_norm(T(v + h.data), p["norm.gain"], p["norm.bias"], cfg.ln_eps).data
        np.testing.assert_allclose(global_attention(h, p, cfg).data, ref, atol=1e-12)

    def test_zero_keys_average_values(self):
        p = params_for(self.cfg, widen=0.5)
        p["attn.k.weight"].data[:] = 0.0
        p["attn.k.bias"].data[:] = 0.0
        p["norm.gain"].data[:] = 1.0
        p["norm.bias"].data[:] = 0.0
        h = np.random.default_rng(1).normal(size=(1, 3, 4, 4))
        scores = attention_scores(T(h), p, self.cfg).data
        np.testing.assert_allclose(scores, 0.25)
        v = h @ p["attn.v.weight"].data + p["attn.v.bias"].data
        mean_v = np.broadcast_to(v.mean(axis=2, keepdims=True), v.shape)
        ref = tt.layer_norm(T(mean_v + h), p["norm.gain"], p["norm.bias"], self.cfg.ln_eps).data
        np.testing.assert_allclose(global_attention(T(h), p, self.cfg).data, ref, atol=1e-12)

    @settings(max_examples=30, deadline=None)
    @given(st.integers(0, 2**31 - 1))
    def test_rows_sum_to_one(self, seed):
        p = params_for(self.cfg, seed % 97, widen=2.0)
        h = np.random.default_rng(seed).normal(size=(2, 3, 4, 4)) * 3
        s = attention_scores(T(h), p, self.cfg).data
        assert np.abs(s.sum(axis=-1) - 1.0).max() < 1e-6

    def test_nodes_independent(self):
        p = params_for(self.cfg, widen=0.5)
        h = np.random.default_rng(2).normal(size=(1, 3, 4, 4))
        out = global_attention(T(h), p, self.cfg).data
        h2 = h.copy()
        h2[:, 1] += 1.0
        out2 = global_attention(T(h2), p, self.cfg).data
        np.testing.assert_array_equal(out[:, [0, 2]], out2[:, [0, 2]])


class TestHead:
    cfg = ModelConfig(n_nodes=2, horizon=3, hidden_dim=2, embed_dim=2)

    def test_zero_weight_gives_bias(self):
        p = params_for(self.cfg)
        p["head.weight"].data[:] = 0.0
        p["head.bias"].data[:] = [1.0, 2.0, 3.0]
        out = predict_head(T(np.random.default_rng(0).normal(size=(2, 2, 3, 4))), p, self.cfg).data
        assert out.shape == (2, 2, 3, 1)
        np.testing.assert_array_equal(out[..., 0], np.broadcast_to([1.0, 2.0, 3.0], (2, 2, 3)))

    @pytest.mark.parametrize("head", ["flatten", "per_step"])
    def test_zero_input(self, head):
        cfg = self.cfg.replace(head=head)
        out = predict_head(T(np.zeros((1, 2, 3, 4))), params_for(cfg), cfg).data
        np.testing.assert_array_equal(out, np.zeros((1, 2, 3, 1)))

    def test_flatten_mixes_steps(self):
        p = params_for(self.cfg)
        h = np.random.default_rng(1).normal(size=(1, 2, 3, 4))
        ref = h.reshape(1, 2, 12) @ p["head.weight"].data + p["head.bias"].data
        np.testing.assert_allclose(predict_head(T(h), p, self.cfg).data[..., 0], ref, atol=1e-12)


MODES = ["semi_autonomous", "predefined_only", "adaptive_only", "none"]


class TestForward:
    def test_zero_params(self, small_cfg, small_graph):
        x = T(np.random.default_rng(0).normal(size=(2, 3, 4, 1)))
        out = forward(x, small_graph, zero_params(small_cfg, F64), small_cfg).data
        np.testing.assert_array_equal(out, np.zeros((2, 4, 3, 1)))

    def test_window_length_checked(self, small_cfg, small_graph):
        with pytest.raises(DimensionError, match="horizon"):
            forward(T(np.zeros((1, 4, 4, 1))), small_graph, params_for(small_cfg), small_cfg)

    def test_graph_size_checked(self, small_cfg):
        with pytest.raises(DimensionError):
            forward(T(np.zeros((1, 3, 4, 1))), ring_graph(5), params_for(small_cfg), small_cfg)

    @pytest.mark.parametrize("mode", MODES)
    def test_permutation_equivariance(self, mode):
        cfg = ModelConfig(n_nodes=8, horizon=4, hidden_dim=6, embed_dim=3, adjacency_mode=mode)
        rng = np.random.default_rng(11)
        g = erdos_graph(8, 0.4, rng)
        p = params_for(cfg, 11, widen=0.3)
        x = rng.normal(size=(2, 4, 8, 1))
        ref = forward(T(x), g, p, cfg).data
        perm = rng.permutation(8)
        if "embedding" in p:
            p["embedding"].data = p["embedding"].data[perm].copy()
        out = forward(T(x[:, :, perm]), g.permuted(perm), p, cfg).data
        assert np.abs(out - ref[:, perm]).max() < 1e-5

    def test_deterministic(self, small_cfg, small_graph):
        p = params_for(small_cfg, widen=0.3)
        x = T(np.random.default_rng(3).normal(size=(2, 3, 4, 1)))
        a = forward(x, small_graph, p, small_cfg).data
        b = forward(x, small_graph, p, small_cfg).data
        assert a.tobytes() == b.tobytes()

    def test_adaptive_only_ignores_graph(self, small_cfg):
        cfg = small_cfg.replace(adjacency_mode="adaptive_only")
        p = params_for(cfg, widen=0.3)
        x = T(np.random.default_rng(4).normal(size=(2, 3, 4, 1)))
        complete = Graph(4, np.ones((4, 4)) - np.eye(4))
        a = forward(x, complete, p, cfg).data
        b = forward(x, ring_graph(4), p, cfg).data
        assert a.tobytes() == b.tobytes()

    def test_batch_consistency(self, small_cfg, small_graph):
        p = params_for(small_cfg, widen=0.3)
        x = np.random.default_rng(5).normal(size=(3, 3, 4, 1))
        both = forward(T(x), small_graph, p, small_cfg).data
        for b in range(3):
            assert np.abs(both[b] - forward(T(x[b:b + 1]), small_graph, p, small_cfg).data[0]).max() < 1e-6


VARIANT_CFGS = {
    "full": {},
    "matmul": {"adjacency_combine": "matmul"},
    "per_step": {"head": "per_step"},
    "two_layers": {"gcn_layers": 2},
    "predefined": {"adjacency_mode": "predefined_only"},
    "plain": {"adjacency_mode": "none", "use_reverse": False, "use_attention": False},
}


@pytest.mark.parametrize("variant", list(VARIANT_CFGS))
def test_loss_gradient_all_params(prec, small_cfg, small_graph, variant):
    cfg = small_cfg.replace(**VARIANT_CFGS[variant])
    tol = RTOL[np.dtype(prec)]
    worst = max(model_fd_trial(cfg, small_graph, prec, trial).rel_err for trial in range(10))
    assert worst < tol


class TestCheckpoint:
    def test_round_trip(self, tmp_path, small_cfg, prec):
        p = params_for(small_cfg, dtype=prec, widen=0.1)
        path = tmp_path / "m.ckpt"
        save_checkpoint(path, p, small_cfg, {"best_epoch": 3})
        q = load_checkpoint(path, small_cfg, dtype=prec)
        for name, t in p.items():
            assert q[name].data.dtype == prec
            assert q[name].data.tobytes() == t.data.tobytes()
        doc = read_checkpoint_config(path)
        assert ModelConfig.from_dict(doc["model"]) == small_cfg and doc["best_epoch"] == 3

    def test_layout(self, tmp_path):
        cfg = ModelConfig(n_nodes=1, horizon=1, hidden_dim=1, embed_dim=1, use_reverse=False, use_attention=False)
        path = tmp_path / "m.ckpt"
        save_checkpoint(path, zero_params(cfg, F64), cfg)
        buf = path.read_bytes()
        assert buf[:4] == b"MSTF"
        assert struct.unpack_from("<II", buf, 4) == (1, len(zero_params(cfg)))
        (ln,) = struct.unpack_from("<H", buf, 12)
        assert buf[14:14 + ln] == b"embedding"

    def test_version_rejected(self, tmp_path, small_cfg):
        path = tmp_path / "m.ckpt"
        save_checkpoint(path, params_for(small_cfg), small_cfg)
        buf = bytearray(path.read_bytes())
        buf[4:8] = struct.pack("<I", 99)
        path.write_bytes(bytes(buf))
        with pytest.raises(CheckpointError, match="version"):
            read_checkpoint(path)

    def test_bad_magic(self, tmp_path):
        path = tmp_path / "m.ckpt"
        path.write_bytes(b"NOPE" + bytes(8))
        with pytest.raises(CheckpointError, match="magic"):
            read_checkpoint(path)

    def test_truncated(self, tmp_path, small_cfg):
        path = tmp_path / "m.ckpt"
        save_checkpoint(path, params_for(small_cfg), small_cfg)
        path.write_bytes(path.read_bytes()[:-5])
        with pytest.raises(CheckpointError, match="truncated"):
            read_checkpoint(path)

    def test_shape_rejected(self, tmp_path, small_cfg):
        path = tmp_path / "m.ckpt"
        save_checkpoint(path, params_for(small_cfg), small_cfg)
        with pytest.raises(CheckpointError, match="shape"):
            load_checkpoint(path, small_cfg.replace(embed_dim=4))

    def test_names_rejected(self, tmp_path, small_cfg):
        path = tmp_path / "m.ckpt"
        save_checkpoint(path, params_for(small_cfg), small_cfg)
        with pytest.raises(CheckpointError, match="names"):
            load_checkpoint(path, small_cfg.replace(use_attention=False))
