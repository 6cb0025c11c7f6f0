import math
from dataclasses import replace

import numpy as np
import pytest

from aeroloc.bev import (
    BevConfig,
    BevParams,
    ValueList,
    bev_mask,
    build_bev,
    cross_attention_block,
    gather_values,
    init_bev,
    pillars,
    predict_logits,
    predict_offsets,
    self_attention_block,
    value_tokens,
)
from aeroloc.geometry import CameraRig, PinholeCamera, project_points
from aeroloc.grid import FeatureMap, sample_array
from aeroloc.render import surround_rig

C_V = 8
CONFIG = BevConfig(d_B=16, q_B=1.0, c_B=8, n_blocks=2, n_heads=2, z=6, h_min=-1.0, h_max=3.0)


def pv_maps(rig, seed=0, stride=4, channels=C_V):
    rng = np.random.default_rng(seed)
    return [FeatureMap(rng.normal(size=(-(-cam.height // stride), -(-cam.width // stride), channels)), stride)
            for cam in rig]


@pytest.fixture(scope="module")
def rig():
    return surround_rig()


@pytest.fixture(scope="module")
def params(rig):
    return BevParams.seeded(CONFIG, len(rig), C_V, seed=3)


def run(config, rig, maps, params, trace=None):
    return build_bev(config, rig, maps, params, seed=1, trace=trace)


def per_query_sums(weights, query_index, n):
    total = np.zeros((n, weights.shape[1]))
    np.add.at(total, query_index, weights)
    return total[np.unique(query_index)]


class TestInit:
    def test_mask_centre_and_corner(self):
        m = bev_mask(CONFIG)
        assert m[8, 8] and m[7, 7] and not m[0, 0] and not m[15, 15]

    @pytest.mark.parametrize("d", [128, 160])
    def test_mask_area(self, d):
        assert abs(bev_mask(BevConfig(d_B=d)).mean() - math.pi / 4) <= 0.02

    def test_seeded(self):
        a, b, c = init_bev(CONFIG, 5), init_bev(CONFIG, 5), init_bev(CONFIG, 6)
        assert np.array_equal(a.grid.data, b.grid.data) and not np.array_equal(a.grid.data, c.grid.data)
        assert not a.offsets.any() and a.logits is None

    def test_config_validation(self):
        with pytest.raises(ValueError):
            BevConfig(c_B=10, n_heads=4)
        with pytest.raises(ValueError):
            BevConfig(z=1)


class TestGather:
    def test_cameras_facing_away(self):
        front = CameraRig((PinholeCamera.looking("f", 0.0, 32.0, 64, 48, (0.0, 0.0, 1.6)),))
        cfg = replace(CONFIG, use_offsets=False)
        vals = gather_values(init_bev(cfg, 0), front, pv_maps(front), cfg, {})
        counts = vals.counts(cfg.d_B ** 2).reshape(cfg.d_B, cfg.d_B)
        cols = np.arange(cfg.d_B)
        behind = (cols - cfg.centre) * cfg.q_B < 0
        assert counts[:, behind].sum() == 0 and counts[:, ~behind].sum() > 0

    def test_integer_pixel_sample(self):
        cfg = BevConfig(d_B=17, q_B=0.5, c_B=4, n_heads=1, z=5, h_min=-1.0, h_max=3.0, use_offsets=False)
        cam = replace(PinholeCamera.looking("f", 0.0, 32.0, 64, 48, (0.0, 0.0, 2.0)), cx=32.0, cy=24.0)
        one = CameraRig((cam,))
        fmap = pv_maps(one, seed=4)[0]
        vals = gather_values(init_bev(cfg, 0), one, [fmap], cfg, {})
        # cell (row 8, col 12) sits at x = 2 m straight ahead; pillar point 3 is at z = 2 m
        hit = np.nonzero((vals.query_index == 8 * 17 + 12) & (vals.pillar_index == 3))[0]
        assert len(hit) == 1
        np.testing.assert_array_equal(vals.features[hit[0]], fmap.data[6, 8])

    def test_bilinear_samples_of_projection(self, rig):
        cfg = replace(CONFIG, use_offsets=False)
        maps = pv_maps(rig, 5)
        vals = gather_values(init_bev(cfg, 0), rig, maps, cfg, {})
        rows, cols = np.divmod(vals.query_index, cfg.d_B)
        pts = pillars(cfg, rows, cols)[np.arange(len(rows)), vals.pillar_index]
        order = rig.slot_order()
        for rank, pos in enumerate(order):
            sel = vals.camera_index == rank
            uv, inside = project_points(pts[sel], rig.cameras[pos])
            assert inside.all()
            expect = sample_array(maps[pos].data, uv[:, 0] / 4, uv[:, 1] / 4)
            np.testing.assert_allclose(vals.features[sel], expect, rtol=1e-6, atol=1e-7)

    def test_non_overlapping_rig_bound(self, rig, params):
        vals = gather_values(init_bev(CONFIG, 0), rig, pv_maps(rig), CONFIG, params.block(0, "cross"))
        counts = vals.counts(CONFIG.d_B ** 2)
        assert counts.max() <= CONFIG.z
        assert len(vals) <= CONFIG.d_B ** 2 * CONFIG.z * len(rig)
        assert bev_mask(CONFIG).ravel()[vals.query_index].all()

    def test_entry_order(self, rig, params):
        vals = gather_values(init_bev(CONFIG, 0), rig, pv_maps(rig), CONFIG, params.block(0, "cross"))
        key = np.lexsort((vals.query_index, vals.pillar_index, vals.camera_index))
        assert np.array_equal(key, np.arange(len(vals)))

    def test_map_count_checked(self, rig, params):
        with pytest.raises(ValueError):
            gather_values(init_bev(CONFIG, 0), rig, pv_maps(rig)[:3], CONFIG, params.block(0, "cross"))
        with pytest.raises(ValueError):
            gather_values(init_bev(CONFIG, 0), rig, pv_maps(rig, stride=8), CONFIG, params.block(0, "cross"))

    def test_zero_offset_weights_are_pure_geometry(self, rig, params):
        block = dict(params.block(0, "cross"))
        block["offset.w"] = np.zeros_like(block["offset.w"])
        block["offset.b"] = np.zeros_like(block["offset.b"])
        maps = pv_maps(rig, 6)
        a = gather_values(init_bev(CONFIG, 0), rig, maps, CONFIG, block)
        b = gather_values(init_bev(CONFIG, 99), rig, maps, CONFIG, block)
        geo = gather_values(init_bev(CONFIG, 0), rig, maps, replace(CONFIG, use_offsets=False), {})
        assert np.array_equal(a.features, b.features) and np.array_equal(a.features, geo.features)


class TestCrossAttention:
    def manual_values(self, n_q, rng):
        # query 3 gets one value, query 5 gets four, the rest none
        qi = np.array([3, 5, 5, 5, 5])
        cam = np.array([0, 0, 1, 2, 3])
        pil = np.array([2, 0, 1, 4, 5])
        return ValueList(rng.normal(size=(5, C_V)), qi, pil, cam, np.zeros((16, 16, CONFIG.z, 2)))

    def test_singleton_and_normalisation(self, params):
        rng = np.random.default_rng(7)
        state = init_bev(CONFIG, 0)
        vals = self.manual_values(256, rng)
        out = cross_attention_block(state, vals, CONFIG, params.block(0, "cross"))
        np.testing.assert_array_equal(out.attention[0], [1.0, 1.0])
        np.testing.assert_allclose(per_query_sums(out.attention, vals.query_index, 256), 1.0, atol=1e-12)

    def test_weights_sum_to_one_on_real_values(self, rig, params):
        trace = []
        run(CONFIG, rig, pv_maps(rig), params, trace)
        for k in (0, 2):
            st = trace[k]
            prior = init_bev(CONFIG, 1) if k == 0 else trace[k - 1]
            vals = gather_values(prior, rig, pv_maps(rig), CONFIG, params.block(k // 2, "cross"))
            assert abs(per_query_sums(st.attention, vals.query_index, 256) - 1.0).max() <= 1e-6

    def test_queries_without_values_pass_through(self, params):
        cfg = replace(CONFIG, use_mlp=False)
        state = init_bev(cfg, 0)
        vals = self.manual_values(256, np.random.default_rng(8))
        out = cross_attention_block(state, vals, cfg, params.block(0, "cross")).grid.data.reshape(256, -1)
        before = state.grid.data.reshape(256, -1)
        untouched = np.setdiff1d(np.arange(256), [3, 5])
        assert np.array_equal(out[untouched], before[untouched])
        assert not np.array_equal(out[5], before[5])

    def test_zero_output_projection_is_identity(self, rig, params):
        cfg = replace(CONFIG, use_mlp=False)
        block = dict(params.block(0, "cross"))
        block["out.w"] = np.zeros_like(block["out.w"])
        block["out.b"] = np.zeros_like(block["out.b"])
        state = init_bev(cfg, 0)
        vals = gather_values(state, rig, pv_maps(rig), cfg, block)
        out = cross_attention_block(state, vals, cfg, block)
        assert np.array_equal(out.grid.data, state.grid.data)


class TestSelfAttention:
    def test_masked_cells_zero(self, params):
        out = self_attention_block(init_bev(CONFIG, 2), CONFIG, params.block(0, "self"))
        assert np.abs(out.grid.data[~bev_mask(CONFIG)]).sum() == 0
        assert np.abs(out.grid.data[bev_mask(CONFIG)]).sum() > 0

    def test_single_token(self):
        cfg = replace(CONFIG, s_R=16)
        p = BevParams.seeded(cfg, 4, C_V, seed=0)
        weights = []
        self_attention_block(init_bev(cfg, 0), cfg, p.block(0, "self"), weights)
        assert weights[0].shape == (256, cfg.n_heads, 1)
        assert np.array_equal(weights[0], np.ones_like(weights[0]))

    @pytest.mark.parametrize("d,s", [(16, 4), (17, 4), (10, 3), (8, 1)])
    def test_token_count(self, d, s):
        cfg = replace(CONFIG, d_B=d, s_R=s)
        p = BevParams.seeded(cfg, 4, C_V, seed=0)
        x = init_bev(cfg, 0).grid.data.astype(np.float64)
        assert value_tokens(x, cfg, p.block(0, "self")).shape == (math.ceil(d / s) ** 2, cfg.c_B)

    def test_attention_rows_normalised(self, params):
        weights = []
        self_attention_block(init_bev(CONFIG, 0), CONFIG, params.block(0, "self"), weights)
        np.testing.assert_allclose(weights[0].sum(axis=2), 1.0, atol=1e-12)


class TestBuild:
    def test_zero_blocks_is_masked_init(self, rig):
        cfg = replace(CONFIG, n_blocks=0)
        out = run(cfg, rig, pv_maps(rig), BevParams({}, 0))
        expect = init_bev(cfg, 1).grid.data * bev_mask(cfg)[:, :, None]
        assert np.array_equal(out.data, expect)

    def test_deterministic(self, rig, params):
        a = run(CONFIG, rig, pv_maps(rig), params)
        b = run(CONFIG, rig, pv_maps(rig), BevParams.seeded(CONFIG, 4, C_V, seed=3))
        assert np.array_equal(a.data, b.data) and a.shape == (16, 16, 8)

    def test_one_block_runs_one_cycle(self, rig, params):
        trace = []
        run(replace(CONFIG, n_blocks=1), rig, pv_maps(rig), params, trace)
        assert len(trace) == 2

    def test_accumulators_sum_predictions(self, rig, params):
        cfg = replace(CONFIG, n_blocks=3)
        p = BevParams.seeded(cfg, 4, C_V, seed=4)
        trace = []
        run(cfg, rig, pv_maps(rig), p, trace)
        entering = [init_bev(cfg, 1)] + [trace[2 * k + 1] for k in range(cfg.n_blocks - 1)]
        off = np.zeros_like(entering[0].offsets)
        logit = 0.0
        for k, st in enumerate(entering):
            block = p.block(k, "cross")
            off = off + predict_offsets(st, cfg, block)
            logit = logit + predict_logits(st, cfg, block)
            np.testing.assert_allclose(trace[2 * k].offsets, off, rtol=1e-12, atol=1e-12)
            np.testing.assert_allclose(trace[2 * k].logits, logit, rtol=1e-12, atol=1e-12)

    def test_masked_after_every_self_attention(self, rig, params):
        trace = []
        run(CONFIG, rig, pv_maps(rig), params, trace)
        outside = ~bev_mask(CONFIG)
        for st in trace[1::2]:
            assert np.abs(st.grid.data[outside]).sum() == 0

    def test_camera_permutation(self, rig, params):
        maps = pv_maps(rig, 9)
        base = run(CONFIG, rig, maps, params)
        perm = [2, 0, 3, 1]
        shuffled = CameraRig(tuple(rig.cameras[i] for i in perm))
        other = run(CONFIG, shuffled, [maps[i] for i in perm], params)
        np.testing.assert_allclose(other.data, base.data, atol=1e-6, rtol=0)

    @pytest.mark.parametrize("change", [
        {"use_offsets": False}, {"offset_skip": False}, {"logit_skip": False},
        {"use_mlp": False}, {"use_self_attention": False}, {"n_heads": 1}, {"n_blocks": 1},
    ])
    def test_ablations_alter_output(self, rig, params, change):
        maps = pv_maps(rig, 10)
        cfg = replace(CONFIG, **change)
        p = params if "n_heads" not in change else BevParams.seeded(cfg, 4, C_V, seed=3)
        trace = []
        out = run(cfg, rig, maps, p, trace)
        base = run(CONFIG, rig, maps, params)
        assert not np.array_equal(out.data, base.data)
        assert out.shape == base.shape and np.isfinite(out.data).all()
        assert np.abs(out.data[~bev_mask(cfg)]).sum() == 0
        assert all(np.abs(st.grid.data[~bev_mask(cfg)]).sum() == 0 for st in trace[1::2])


def test_params_blob_roundtrip(tmp_path, params):
    params.save(tmp_path / "bev.pblob")
    back = BevParams.load(tmp_path / "bev.pblob")
    assert back.seed == 3 and all(np.array_equal(back[k], params[k]) for k in params)
    assert set(back.block(1, "self")) == set(params.block(1, "self"))
