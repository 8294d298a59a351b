"""Encoder branches, self-attention, cross-attention gating, and fusion."""

import numpy as np
import pytest

from dualpolnet.config import ModelConfig
from dualpolnet.errors import ShapeError
from dualpolnet.optim import ParamStore
from dualpolnet.pccaf import (BRANCH_INDEX, build_encoder, build_pccaf, build_sa,
                              build_xattn, cross_attention, encode_branch, gated_branches,
                              pccaf_forward, sa_module)
from dualpolnet.tensor import Tensor, Tape, backward, concat_channels, mul, precision, tsum

F64 = np.float64


def tiny_cfg(**kw):
    base = dict(classes=3, input_size=32, base_width=2, fc1_width=16, seed=0)
    base.update(kw)
    cfg = ModelConfig(**base)
    cfg.validate()
    return cfg


def t64(x):
    return Tensor(np.asarray(x, dtype=F64), dtype=F64)


class TestEncoder:
    def test_stage_shape_chain(self):
        cfg = tiny_cfg()
        store = ParamStore(seed=0)
        build_encoder(store, "pccaf.enc2", cfg.stage_widths())
        trace = []
        x = t64(np.random.default_rng(0).normal(size=(2, 1, 32, 32)))
        out = encode_branch(x, store, "pccaf.enc2", "train", trace=trace)
        assert out.shape == (2, 16, 2, 2)
        assert trace == [("pccaf.enc2.s1", (2, 2, 16, 16)),
                         ("pccaf.enc2.s2", (2, 4, 8, 8)),
                         ("pccaf.enc2.s3", (2, 8, 4, 4)),
                         ("pccaf.enc2.s4", (2, 16, 2, 2))]

    def test_zero_input_gives_zero_features(self):
        # conv biases and BN betas start at zero, so the zero image stays zero
        store = ParamStore(seed=1)
        build_encoder(store, "pccaf.enc1", [2, 4, 8, 16])
        out = encode_branch(t64(np.zeros((1, 1, 32, 32))), store, "pccaf.enc1", "train")
        assert np.abs(out.data).max() == 0.0

    def test_full_width_parameter_count(self):
        store = ParamStore(seed=0)
        build_encoder(store, "pccaf.enc1", [8, 16, 32, 64])
        # conv: 1*9*8+8, 8*9*16+16, 16*9*32+32, 32*9*64+64; bn: 2 per channel
        conv = (1 * 9 * 8 + 8) + (8 * 9 * 16 + 16) + (16 * 9 * 32 + 32) + (32 * 9 * 64 + 64)
        bn = 2 * (8 + 16 + 32 + 64)
        assert store.n_params() == conv + bn == 24624

    def test_eval_mode_uses_running_stats(self):
        store = ParamStore(seed=2)
        build_encoder(store, "pccaf.enc3", [2, 4, 8, 16])
        rng = np.random.default_rng(3)
        x = t64(rng.normal(size=(2, 1, 32, 32)))
        a = encode_branch(x, store, "pccaf.enc3", "eval").data
        # training on different data shifts the running stats, changing eval output
        encode_branch(t64(rng.normal(size=(2, 1, 32, 32)) + 5.0), store, "pccaf.enc3", "train")
        b = encode_branch(x, store, "pccaf.enc3", "eval").data
        assert np.abs(a - b).max() > 1e-6


class TestSaModule:
    def build(self, c=4, seed=0):
        store = ParamStore(seed=seed)
        build_sa(store, "sa", c)
        return store

    def test_shape_preserved(self):
        store = self.build(c=4)
        rng = np.random.default_rng(4)
        x = t64(rng.normal(size=(2, 4, 3, 3)))
        assert sa_module(x, store, "sa").shape == (2, 4, 3, 3)

    def test_spatially_constant_input_gives_constant_output(self):
        # identical queries make every attention row uniform, so each position
        # receives the same mixture and the output is constant over space
        store = self.build(c=4, seed=5)
        x = t64(np.broadcast_to(np.array([1.0, -2.0, 0.5, 3.0]).reshape(1, 4, 1, 1),
                                (1, 4, 4, 4)).copy())
        out = sa_module(x, store, "sa").data
        spread = out.max(axis=(2, 3)) - out.min(axis=(2, 3))
        assert spread.max() < 1e-10

    def test_odd_channels_rejected(self):
        store = self.build(c=4)
        with pytest.raises(ShapeError, match="even"):
            sa_module(t64(np.zeros((1, 3, 2, 2))), store, "sa")

    def test_parameter_count(self):
        store = self.build(c=64)
        # three 1x1 convs 64->32 plus one 32->64, each with bias
        want = 3 * (64 * 32 + 32) + (32 * 64 + 64)
        assert store.n_params() == want == 8352

    def test_gradient_reaches_all_sa_params(self):
        store = self.build(c=4, seed=6)
        x = t64(np.random.default_rng(7).normal(size=(1, 4, 3, 3)))
        with Tape() as tape:
            loss = tsum(sa_module(x, store, "sa"))
        backward(loss, tape)
        for name in store.names():
            assert store[name].grad is not None, name
            if name.endswith("weight"):
                assert np.abs(store[name].grad).max() > 0.0, name


class TestCrossAttention:
    def build(self, c=4, with_sa=True, seed=0):
        store = ParamStore(seed=seed)
        build_xattn(store, "xa", c, with_sa)
        return store

    def test_output_in_unit_interval(self):
        store = self.build()
        rng = np.random.default_rng(8)
        zi = t64(rng.normal(size=(2, 4, 3, 3)))
        zr = t64(rng.normal(size=(2, 4, 3, 3)))
        a = cross_attention(zi, zr, store, "xa").data
        assert a.min() > 0.0 and a.max() < 1.0

    def test_zero_weights_give_half(self):
        store = self.build()
        for name in store.names():
            store[name].data[...] = 0.0
        zi = t64(np.random.default_rng(9).normal(size=(1, 4, 2, 2)))
        a = cross_attention(zi, zi, store, "xa").data
        assert np.abs(a - 0.5).max() < 1e-12

    def test_order_matters(self):
        store = self.build(seed=10)
        rng = np.random.default_rng(11)
        zi = t64(rng.normal(size=(1, 4, 3, 3)))
        zr = t64(rng.normal(size=(1, 4, 3, 3)))
        ab = cross_attention(zi, zr, store, "xa").data
        ba = cross_attention(zr, zi, store, "xa").data
        assert np.abs(ab - ba).max() > 1e-6

    def test_sa_free_store_serves_sa_free_forward(self):
        store = self.build(with_sa=False, seed=12)
        assert "xa.b1.sa.phi.weight" not in store
        rng = np.random.default_rng(13)
        zi = t64(rng.normal(size=(1, 4, 3, 3)))
        a = cross_attention(zi, zi, store, "xa", use_sa=False).data
        assert a.shape == (1, 4, 3, 3)
        with pytest.raises(KeyError):
            cross_attention(zi, zi, store, "xa", use_sa=True)

    def test_shape_mismatch_rejected(self):
        store = self.build()
        with pytest.raises(ShapeError, match="differ"):
            cross_attention(t64(np.zeros((1, 4, 3, 3))), t64(np.zeros((1, 4, 2, 2))), store, "xa")

    def test_parameter_count_full_width(self):
        store = self.build(c=64)
        reduce = 128 * 9 * 64 + 64
        block = (64 * 9 * 64 + 64) + 8352  # conv3x3 + SA bottleneck
        assert store.n_params() == reduce + 2 * block == 164352


class TestGatedBranches:
    def test_default_gates_secondaries(self):
        assert gated_branches(tiny_cfg()) == ["i1", "i3"]

    def test_main_branch_follows_config(self):
        assert gated_branches(tiny_cfg(main_branch="i1")) == ["i2", "i3"]

    def test_disabled_attention_gates_nothing(self):
        assert gated_branches(tiny_cfg(enable_cross_attention=False)) == []

    def test_subset_branches(self):
        assert gated_branches(tiny_cfg(enable_i1=False)) == ["i3"]


class TestPccafForward:
    def inputs(self, cfg, seed=0, n=1):
        rng = np.random.default_rng(seed)
        s = cfg.input_size
        return tuple(t64(rng.uniform(0, 1, size=(n, 1, s, s))) for _ in range(3))

    def test_fused_shapes(self):
        cfg = tiny_cfg()
        store = ParamStore(seed=cfg.seed)
        build_pccaf(store, cfg)
        x1, x2, x3 = self.inputs(cfg)
        z_s, z_main = pccaf_forward(x1, x2, x3, store, cfg, "train")
        assert z_s.shape == (1, 48, 2, 2)   # 3 branches x 16 channels
        assert z_main.shape == (1, 16, 2, 2)

    def test_add_fusion_shape(self):
        cfg = tiny_cfg(fusion="add")
        store = ParamStore(seed=cfg.seed)
        build_pccaf(store, cfg)
        z_s, _ = pccaf_forward(*self.inputs(cfg), store=store, cfg=cfg, mode="train")
        assert z_s.shape == (1, 16, 2, 2)

    def test_zero_inputs_give_zero_fusion(self):
        cfg = tiny_cfg()
        store = ParamStore(seed=cfg.seed)
        build_pccaf(store, cfg)
        s = cfg.input_size
        zeros = [t64(np.zeros((1, 1, s, s))) for _ in range(3)]
        z_s, _ = pccaf_forward(*zeros, store=store, cfg=cfg, mode="train")
        assert np.abs(z_s.data).max() == 0.0

    def test_single_branch_passthrough(self):
        cfg = tiny_cfg(enable_i1=False, enable_i3=False)
        store = ParamStore(seed=cfg.seed)
        build_pccaf(store, cfg)
        _, x2, _ = self.inputs(cfg)
        z_s, z_main = pccaf_forward(None, x2, None, store, cfg, "train")
        assert np.array_equal(z_s.data, z_main.data)

    def test_disabled_attention_is_plain_concat(self):
        cfg = tiny_cfg(enable_cross_attention=False)
        store = ParamStore(seed=cfg.seed)
        build_pccaf(store, cfg)
        x1, x2, x3 = self.inputs(cfg, seed=14)
        z_s, _ = pccaf_forward(x1, x2, x3, store, cfg, "eval")
        parts = [encode_branch(x, store, f"pccaf.enc{k}", "eval")
                 for k, x in ((1, x1), (2, x2), (3, x3))]
        want = concat_channels(parts).data
        assert np.array_equal(z_s.data, want)

    def test_gating_composes_from_public_pieces(self):
        cfg = tiny_cfg()
        store = ParamStore(seed=cfg.seed)
        build_pccaf(store, cfg)
        x1, x2, x3 = self.inputs(cfg, seed=15)
        z_s, _ = pccaf_forward(x1, x2, x3, store, cfg, "eval")
        z = {k: encode_branch(x, store, f"pccaf.enc{k}", "eval")
             for k, x in ((1, x1), (2, x2), (3, x3))}
        c = cfg.feature_width()
        for branch, sl in (("i1", slice(0, c)), ("i3", slice(2 * c, 3 * c))):
            k = BRANCH_INDEX[branch]
            a = cross_attention(z[k], z[2], store, f"pccaf.xattn{k}")
            assert np.allclose(z_s.data[:, sl], mul(z[k], a).data, atol=1e-12)
        assert np.array_equal(z_s.data[:, c:2 * c], z[2].data)

    def test_gating_shrinks_magnitudes(self):
        cfg = tiny_cfg()
        store = ParamStore(seed=cfg.seed)
        build_pccaf(store, cfg)
        x1, x2, x3 = self.inputs(cfg, seed=16)
        z_s, _ = pccaf_forward(x1, x2, x3, store, cfg, "eval")
        z1 = encode_branch(x1, store, "pccaf.enc1", "eval").data
        gated = z_s.data[:, :cfg.feature_width()]
        assert np.all(np.abs(gated) <= np.abs(z1) + 1e-12)
        assert np.all(np.sign(gated) * np.sign(z1) >= 0.0)

    def test_secondary_slice_independent_of_other_secondary(self):
        cfg = tiny_cfg()
        store = ParamStore(seed=cfg.seed)
        build_pccaf(store, cfg)
        x1, x2, x3 = self.inputs(cfg, seed=17)
        base = pccaf_forward(x1, x2, x3, store, cfg, "eval")[0].data
        x3b = t64(np.random.default_rng(18).uniform(0, 1, size=x3.shape))
        alt = pccaf_forward(x1, x2, x3b, store, cfg, "eval")[0].data
        c = cfg.feature_width()
        assert np.array_equal(base[:, :2 * c], alt[:, :2 * c])
        assert not np.array_equal(base[:, 2 * c:], alt[:, 2 * c:])

    def test_missing_enabled_input_rejected(self):
        cfg = tiny_cfg()
        store = ParamStore(seed=cfg.seed)
        build_pccaf(store, cfg)
        _, x2, x3 = self.inputs(cfg)
        with pytest.raises(ShapeError, match="i1"):
            pccaf_forward(None, x2, x3, store, cfg, "train")

    def test_mismatched_input_shapes_rejected(self):
        cfg = tiny_cfg()
        store = ParamStore(seed=cfg.seed)
        build_pccaf(store, cfg)
        x1, x2, _ = self.inputs(cfg)
        bad = t64(np.zeros((1, 1, 16, 16)))
        with pytest.raises(ShapeError, match="differ"):
            pccaf_forward(x1, x2, bad, store, cfg, "train")

    def test_gradients_reach_every_branch(self):
        cfg = tiny_cfg()
        store = ParamStore(seed=cfg.seed)
        build_pccaf(store, cfg)
        x1, x2, x3 = self.inputs(cfg, seed=19)
        with Tape() as tape:
            z_s, _ = pccaf_forward(x1, x2, x3, store, cfg, "train")
            loss = tsum(z_s)
        backward(loss, tape)
        for k in (1, 2, 3):
            g = store[f"pccaf.enc{k}.s1.conv.weight"].grad
            assert g is not None and np.abs(g).max() > 0.0, k
        for k in (1, 3):
            g = store[f"pccaf.xattn{k}.reduce.weight"].grad
            assert g is not None and np.abs(g).max() > 0.0, k
