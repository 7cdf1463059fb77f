import numpy as np
import pytest
from hypothesis import given, settings
from hypothesis import strategies as st

from panokit.geometry import DepthMap
from panokit.tracking import PanopticMap
from panokit.warpfusion import (
    AttentionGate,
    ConstantGate,
    FlowField,
    GateTangent,
    Pyramid,
    WarpFusionError,
    ag_fuse,
    ag_fuse_all,
    ag_fuse_jvp,
    build_pyramid,
    channel_attention,
    default_kernel_size,
    load_fusion_bank,
    random_fusion_bank,
    save_fusion_bank,
    warp_forward,
)


def zero_flow(h, w):
    return FlowField.from_values(np.zeros((h, w, 2)))


class TestWarpForward:
    def test_identity_warp(self):
        rng = np.random.default_rng(0)
        src = rng.normal(size=(6, 6, 3))
        depth = DepthMap.from_values(np.full((6, 6), 4.0))
        out, cov = warp_forward(src, zero_flow(6, 6), depth)
        assert np.array_equal(out, src)
        assert cov.all()

    def test_depth_conflict_near_wins(self):
        # two sources map to (3, 3); the nearer one (depth 2, value 9) survives
        src = np.zeros((6, 6, 1))
        src[0, 0, 0] = 7.0
        src[5, 5, 0] = 9.0
        flow = np.zeros((6, 6, 2))
        flow[0, 0] = [3.0, 3.0]
        flow[5, 5] = [-2.0, -2.0]
        depths = np.full((6, 6), 10.0)
        depths[0, 0] = 5.0
        depths[5, 5] = 2.0
        out, cov = warp_forward(src, FlowField.from_values(flow), DepthMap.from_values(depths))
        assert out[3, 3, 0] == 9.0
        assert cov[3, 3]

    def test_off_image_dropped(self):
        src = np.ones((4, 4, 1))
        flow = np.zeros((4, 4, 2))
        flow[0, 0] = [100.0, 0.0]
        depth = DepthMap.from_values(np.full((4, 4), 3.0))
        out, cov = warp_forward(src, FlowField.from_values(flow), depth)
        assert not cov[0, 0]  # nothing else landed at (0, 0)

    def test_dimension_mismatch(self):
        with pytest.raises(WarpFusionError):
            warp_forward(np.zeros((4, 4, 1)), zero_flow(5, 5), DepthMap.from_values(np.ones((5, 5))))

    def test_deterministic(self):
        rng = np.random.default_rng(1)
        src = rng.normal(size=(8, 8, 2))
        flow = FlowField.from_values(rng.normal(scale=2.0, size=(8, 8, 2)))
        depth = DepthMap.from_values(rng.uniform(1.0, 9.0, size=(8, 8)))
        a = warp_forward(src, flow, depth)
        b = warp_forward(src, flow, depth)
        assert np.array_equal(a[0], b[0]) and np.array_equal(a[1], b[1])

    @given(st.integers(0, 2**32 - 1))
    @settings(max_examples=25, deadline=None)
    def test_depth_priority_bruteforce(self, seed):
        rng = np.random.default_rng(seed)
        h = w = 7
        src = np.arange(h * w, dtype=np.float64).reshape(h, w, 1)
        flow = FlowField.from_values(rng.integers(-3, 4, size=(h, w, 2)).astype(float))
        depth = DepthMap.from_values(rng.uniform(1.0, 9.0, size=(h, w)))
        out, cov = warp_forward(src, flow, depth)
        # brute force: smallest depth (then smallest index) wins per target
        best = {}
        for r in range(h):
            for c in range(w):
                t = (int(round(c + flow.values[r, c, 0])), int(round(r + flow.values[r, c, 1])))
                if not (0 <= t[0] < w and 0 <= t[1] < h):
                    continue
                key = (depth.values[r, c], r * w + c)
                if t not in best or key < best[t][0]:
                    best[t] = (key, src[r, c, 0])
        for (tx, ty), (_, val) in best.items():
            assert cov[ty, tx]
            assert out[ty, tx, 0] == val
        assert cov.sum() == len(best)

    def test_warp_panoptic_map(self):
        sem = np.ones((5, 5), dtype=np.uint16)
        inst = np.zeros((5, 5), dtype=np.uint16)
        sem[1, 1], inst[1, 1] = 4, 2
        pan = PanopticMap(sem, inst)
        flow = np.zeros((5, 5, 2))
        flow[1, 1] = [2.0, 1.0]
        depths = np.full((5, 5), 5.0)
        depths[1, 1] = 1.0
        out, cov = warp_forward(pan, FlowField.from_values(flow), DepthMap.from_values(depths))
        assert out.semantics[2, 3] == 4
        assert out.instances[2, 3] == 2
        assert cov[2, 3]

    def test_invalid_flow_pixels_not_splatted(self):
        src = np.ones((4, 4, 1))
        flow = np.zeros((4, 4, 2))
        flow[2, 2] = [1e10, 1e10]
        ff = FlowField.from_values(flow)
        assert not ff.valid[2, 2]
        depth = DepthMap.from_values(np.full((4, 4), 2.0))
        out, cov = warp_forward(src, ff, depth)
        assert cov.sum() == 15


def affine_gate(c, n=1, scale=None, bias=None, kernel=None, seed=0):
    rng = np.random.default_rng(seed)
    scale = np.zeros(2 * c) if scale is None else np.asarray(scale, float)
    bias = np.zeros(2 * c) if bias is None else np.asarray(bias, float)
    kernel = rng.normal(size=(n, n, 2 * c, c)) if kernel is None else np.asarray(kernel, float)
    return AttentionGate(scale, bias, kernel)


class TestChannelAttention:
    def test_zero_parameters_give_half(self):
        gate = affine_gate(2)
        w = channel_attention(np.random.default_rng(0).normal(size=(4, 4, 4)), gate)
        assert np.allclose(w, 0.5)

    def test_bias_ten_logistic(self):
        gate = affine_gate(1, bias=[10.0, 0.0])
        w = channel_attention(np.zeros((3, 3, 2)), gate)
        assert w[0] == pytest.approx(0.9999546021312976, abs=1e-10)
        assert w[1] == pytest.approx(0.5)

    def test_spatial_permutation_invariance(self):
        rng = np.random.default_rng(3)
        gate = affine_gate(2, scale=rng.normal(size=4), bias=rng.normal(size=4))
        x = rng.normal(size=(5, 5, 4))
        shuffled = x.reshape(25, 4)[rng.permutation(25)].reshape(5, 5, 4)
        assert np.allclose(channel_attention(x, gate), channel_attention(shuffled, gate))

    def test_open_interval_range(self):
        rng = np.random.default_rng(4)
        gate = affine_gate(3, scale=rng.normal(size=6) * 5, bias=rng.normal(size=6) * 5)
        w = channel_attention(rng.normal(size=(4, 4, 6)) * 10, gate)
        assert np.all(w > 0.0) and np.all(w < 1.0)

    def test_channel_mismatch(self):
        with pytest.raises(WarpFusionError):
            channel_attention(np.zeros((3, 3, 6)), affine_gate(2))


class TestAgFuse:
    def test_selector_kernel_returns_warped(self):
        rng = np.random.default_rng(5)
        z_t = rng.normal(size=(4, 4, 1))
        z_w = rng.normal(size=(4, 4, 1))
        kernel = np.array([1.0, 0.0]).reshape(1, 1, 2, 1)
        gate = ConstantGate([1.0, 1.0], kernel)
        out = ag_fuse(z_t, z_w, gate)
        assert np.allclose(out, z_w)

    def test_mean_kernel_by_hand(self):
        z_w = np.array([[1.0, 2.0], [3.0, 4.0]]).reshape(2, 2, 1)
        z_t = np.array([[5.0, 6.0], [7.0, 8.0]]).reshape(2, 2, 1)
        kernel = np.array([0.5, 0.5]).reshape(1, 1, 2, 1)
        out = ag_fuse(z_t, z_w, ConstantGate([1.0, 1.0], kernel))
        assert np.allclose(out[..., 0], [[3.0, 4.0], [5.0, 6.0]])

    def test_shape_contract(self):
        rng = np.random.default_rng(6)
        z_t = rng.normal(size=(5, 7, 3))
        z_w = rng.normal(size=(5, 7, 3))
        gate = affine_gate(3, n=3, seed=1)
        assert ag_fuse(z_t, z_w, gate).shape == (5, 7, 3)

    def test_linear_with_frozen_gate(self):
        rng = np.random.default_rng(7)
        z_t = rng.normal(size=(4, 4, 2))
        z_w = rng.normal(size=(4, 4, 2))
        kernel = rng.normal(size=(3, 3, 4, 2))
        gate = ConstantGate(np.full(4, 0.7), kernel)
        assert np.allclose(ag_fuse(2 * z_t, 2 * z_w, gate), 2 * ag_fuse(z_t, z_w, gate))

    def test_shape_mismatch(self):
        with pytest.raises(WarpFusionError):
            ag_fuse(np.zeros((4, 4, 2)), np.zeros((4, 5, 2)), affine_gate(2))

    def test_branch_bank(self):
        rng = np.random.default_rng(8)
        z_t = rng.normal(size=(4, 4, 2))
        z_w = rng.normal(size=(4, 4, 2))
        bank = random_fusion_bank(3, 2, 3, seed=11)
        outs = ag_fuse_all(z_t, z_w, bank)
        assert len(outs) == 3
        assert not np.allclose(outs[0], outs[1])


def fd_jvp(z_t, z_w, gate, d_zt, d_zw, d_gate, h=1e-4):
    def at(eps):
        g = AttentionGate(
            gate.scale + eps * d_gate.scale,
            gate.bias + eps * d_gate.bias,
            gate.kernel + eps * d_gate.kernel,
        )
        return ag_fuse(z_t + eps * d_zt, z_w + eps * d_zw, g)

    return (at(h) - at(-h)) / (2 * h)


class TestAgFuseJvp:
    def test_zero_perturbation(self):
        rng = np.random.default_rng(9)
        z_t, z_w = rng.normal(size=(3, 3, 2)), rng.normal(size=(3, 3, 2))
        gate = affine_gate(2, n=3, scale=rng.normal(size=4), bias=rng.normal(size=4), seed=2)
        out = ag_fuse_jvp(z_t, z_w, gate, np.zeros_like(z_t), np.zeros_like(z_w), GateTangent.zeros(gate))
        assert np.allclose(out, 0.0)

    def test_linearity(self):
        rng = np.random.default_rng(10)
        z_t, z_w = rng.normal(size=(4, 4, 3)), rng.normal(size=(4, 4, 3))
        gate = affine_gate(3, n=1, scale=rng.normal(size=6), bias=rng.normal(size=6), seed=3)
        d_zt, d_zw = rng.normal(size=(4, 4, 3)), rng.normal(size=(4, 4, 3))
        dg = GateTangent(rng.normal(size=6), rng.normal(size=6), rng.normal(size=gate.kernel.shape))
        one = ag_fuse_jvp(z_t, z_w, gate, d_zt, d_zw, dg)
        two = ag_fuse_jvp(z_t, z_w, gate, 2 * d_zt, 2 * d_zw, GateTangent(2 * dg.scale, 2 * dg.bias, 2 * dg.kernel))
        assert np.allclose(two, 2 * one, atol=1e-9)

    @given(st.integers(0, 2**32 - 1))
    @settings(max_examples=25, deadline=None)
    def test_matches_finite_differences(self, seed):
        rng = np.random.default_rng(seed)
        h, w, c = int(rng.integers(2, 9)), int(rng.integers(2, 9)), int(rng.integers(1, 5))
        n = int(rng.choice([1, 3]))
        z_t, z_w = rng.normal(size=(h, w, c)), rng.normal(size=(h, w, c))
        gate = AttentionGate(
            rng.normal(size=2 * c), rng.normal(size=2 * c), rng.normal(size=(n, n, 2 * c, c))
        )
        d_zt, d_zw = rng.normal(size=(h, w, c)), rng.normal(size=(h, w, c))
        dg = GateTangent(rng.normal(size=2 * c), rng.normal(size=2 * c), rng.normal(size=gate.kernel.shape))
        got = ag_fuse_jvp(z_t, z_w, gate, d_zt, d_zw, dg)
        want = fd_jvp(z_t, z_w, gate, d_zt, d_zw, dg)
        rel = np.linalg.norm(got - want) / max(np.linalg.norm(want), 1e-12)
        assert rel < 1e-4


class TestPyramid:
    def test_single_level_is_base(self):
        rng = np.random.default_rng(11)
        base = rng.normal(size=(8, 8, 3))
        pyr = build_pyramid(base, 1)
        assert len(pyr) == 1
        assert np.array_equal(pyr[0], base)

    def test_level_sizes_halve(self):
        base = np.zeros((16, 16))
        pyr = build_pyramid(base, 5)
        assert [lvl.shape[0] for lvl in pyr.levels] == [16, 8, 4, 2, 1]

    def test_ceil_sizes(self):
        pyr = build_pyramid(np.zeros((9, 13)), 3)
        assert [lvl.shape for lvl in pyr.levels] == [(9, 13), (5, 7), (3, 4)]

    def test_constant_base_stays_constant(self):
        pyr = build_pyramid(np.full((12, 12), 2.5), 4)
        for lvl in pyr.levels:
            assert np.allclose(lvl, 2.5)

    def test_masked_pooling_ignores_invalid(self):
        base = np.array([[1.0, 100.0], [1.0, 100.0]])
        valid = np.array([[True, False], [True, False]])
        pyr = build_pyramid(base, 2, valid=valid)
        assert pyr.levels[1][0, 0] == pytest.approx(1.0)
        assert pyr.valid[1][0, 0]

    def test_bad_level_count(self):
        with pytest.raises(WarpFusionError):
            build_pyramid(np.zeros((4, 4)), 0)


class TestGateFile:
    def test_roundtrip(self, tmp_path):
        bank = random_fusion_bank(2, 3, 3, seed=21)
        p = tmp_path / "gates.agfw"
        save_fusion_bank(p, bank)
        loaded = load_fusion_bank(p)
        assert len(loaded) == 2
        for a, b in zip(bank, loaded):
            assert np.allclose(a.scale, b.scale, atol=1e-6)
            assert np.allclose(a.kernel, b.kernel, atol=1e-6)

    def test_bytes_roundtrip_exact(self, tmp_path):
        bank = random_fusion_bank(1, 2, 1, seed=5)
        p1, p2 = tmp_path / "a.agfw", tmp_path / "b.agfw"
        save_fusion_bank(p1, bank)
        save_fusion_bank(p2, load_fusion_bank(p1))
        assert p1.read_bytes() == p2.read_bytes()

    def test_seeded_init_deterministic(self):
        a = random_fusion_bank(2, 2, 3, seed=9)
        b = random_fusion_bank(2, 2, 3, seed=9)
        for ga, gb in zip(a, b):
            assert np.array_equal(ga.kernel, gb.kernel)

    def test_truncated_file_reports_offset(self, tmp_path):
        bank = random_fusion_bank(1, 2, 3, seed=1)
        p = tmp_path / "t.agfw"
        save_fusion_bank(p, bank)
        data = p.read_bytes()
        p.write_bytes(data[: len(data) // 2])
        from panokit._binio import FormatError

        with pytest.raises(FormatError, match="byte offset"):
            load_fusion_bank(p)


def test_default_kernel_size_rule():
    assert default_kernel_size(1242, 375) == 3
    assert default_kernel_size(64, 64) == 3
    assert default_kernel_size(1920, 1080) == 5
    assert default_kernel_size(2560, 1440) == 7


def test_gate_invariants():
    with pytest.raises(WarpFusionError):
        AttentionGate(np.zeros(4), np.zeros(4), np.zeros((2, 2, 4, 2)))  # even n
    with pytest.raises(WarpFusionError):
        AttentionGate(np.zeros(3), np.zeros(3), np.zeros((3, 3, 4, 2)))  # bad gate len
