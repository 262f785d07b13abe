import numpy as np
import pytest

import oracles
from conftest import tiny_config
from mrovseg.adapter import AdapterConfig, injection_schedule
from mrovseg.errors import ConfigError
from mrovseg.model import MROVSeg
from mrovseg.tensor import Tensor, default_dtype


def mrf_params(mrf):
    g = lambda t: t.data.astype(np.float64)
    return (g(mrf.dw), g(mrf.pw), g(mrf.pw_b), g(mrf.att_dw), g(mrf.att_pw), g(mrf.att_b))


def randomise(mrf, rng):
    for t in (mrf.dw, mrf.pw, mrf.pw_b, mrf.att_dw, mrf.att_pw, mrf.att_b):
        t.data[...] = rng.standard_normal(t.shape) * 0.5


class TestFusionBlend:
    def test_low_grid_blend_matches_oracle(self, tiny_model, rng):
        mrf = tiny_model.adapter.mrf[2]
        randomise(mrf, rng)
        high, low = rng.standard_normal((8, 8, 8)), rng.standard_normal((8, 4, 4))
        out = mrf.fuse(Tensor(high), Tensor(low))
        ref_f, ref_a = oracles.scale_aware_fusion(high, low, *mrf_params(mrf))
        np.testing.assert_allclose(out.F.data, ref_f.transpose(1, 2, 0), atol=1e-6)
        np.testing.assert_allclose(out.a.data, ref_a.transpose(1, 2, 0), atol=1e-6)

    def test_high_grid_blend_matches_oracle(self, rng):
        with default_dtype(np.float64):
            model = MROVSeg(tiny_config(fusion_at_high_res=True))
            mrf = model.adapter.mrf[2]
            randomise(mrf, rng)
            high, low = rng.standard_normal((8, 8, 8)), rng.standard_normal((8, 4, 4))
            out = mrf.fuse(Tensor(high), Tensor(low))
        ref_f, _ = oracles.scale_aware_fusion(high, low, *mrf_params(mrf), at_high_res=True)
        np.testing.assert_allclose(out.F.data, ref_f.transpose(1, 2, 0), atol=1e-6)

    def _detail(self, mrf, high):
        dw, pw, pw_b = mrf_params(mrf)[:3]
        d = np.einsum("oc,chw->ohw", pw, oracles.conv3x3_depthwise(high, dw)) + pw_b[:, None, None]
        return oracles.avg_pool(d, 4, 4)

    def test_zero_gate_logits_give_even_blend(self, tiny_model, rng):
        mrf = tiny_model.adapter.mrf[2]
        randomise(mrf, rng)
        for t in (mrf.att_dw, mrf.att_pw, mrf.att_b):
            t.data[...] = 0.0
        high, low = rng.standard_normal((8, 8, 8)), rng.standard_normal((8, 4, 4))
        out = mrf.fuse(Tensor(high), Tensor(low))
        assert np.all(out.a.data == 0.5)
        ref = 0.5 * self._detail(mrf, high) + 0.5 * low
        np.testing.assert_allclose(out.F.data, ref.transpose(1, 2, 0), atol=1e-9)

    def test_saturated_gate_keeps_detail_only(self, tiny_model, rng):
        mrf = tiny_model.adapter.mrf[2]
        randomise(mrf, rng)
        mrf.att_b.data[...] = 1e9
        high, low = rng.standard_normal((8, 8, 8)), rng.standard_normal((8, 4, 4))
        out = mrf.fuse(Tensor(high), Tensor(low))
        np.testing.assert_allclose(out.F.data, self._detail(mrf, high).transpose(1, 2, 0),
                                   atol=1e-9)

    def test_gate_in_unit_interval(self, tiny_model, rng):
        mrf = tiny_model.adapter.mrf[0]
        randomise(mrf, rng)
        a = mrf.fuse(Tensor(rng.standard_normal((8, 8, 8)) * 20), Tensor(np.zeros((8, 4, 4)))).a.data
        assert a.min() >= 0.0 and a.max() <= 1.0


class TestAdapter:
    def test_schedule_spreads_injections(self):
        assert injection_schedule(4, 4) == [0, 1, 2, 3]
        assert injection_schedule(5, 6) == [0, 1, 2, 3, 4]
        assert injection_schedule(2, 6) == [0, 3]
        with pytest.raises(ConfigError):
            injection_schedule(3, 2)

    def test_too_many_fusion_layers(self):
        with pytest.raises(ConfigError):
            AdapterConfig(blocks=2, fusion_layers=("stem", 1, 2))

    def test_forward_shapes(self, tiny_model, tiny_image):
        feats = tiny_model.encode(tiny_image)
        q_f, fused, H = tiny_model.adapter.forward(feats, 4)
        assert q_f.shape == (3, 8)
        assert H.shape == (8, 8, 8)
        assert [f.F.shape for f in fused] == [(4, 4, 8), (4, 4, 8)]

    def test_disabled_fusion_is_zero(self, tiny_image):
        with default_dtype(np.float64):
            model = MROVSeg(tiny_config(fusion_enabled=False))
            feats = model.encode(tiny_image)
            _, fused, _ = model.adapter.forward(feats, 4)
        for f in fused:
            np.testing.assert_array_equal(f.F.data, 0.0)

    def test_fusion_changes_visual_features(self, tiny_image):
        with default_dtype(np.float64):
            on, off = MROVSeg(tiny_config()), MROVSeg(tiny_config(fusion_enabled=False))
            H_on = on.adapter.forward(on.encode(tiny_image), 4)[2].data
            H_off = off.adapter.forward(off.encode(tiny_image), 4)[2].data
        assert not np.allclose(H_on, H_off)

    def test_query_projection_is_mlp(self, tiny_model, rng):
        q = rng.standard_normal((3, 8))
        m = tiny_model.adapter.query_mlp
        ref = oracles.mlp(q, m.fc1.weight.data, m.fc1.bias.data, m.fc2.weight.data, m.fc2.bias.data)
        np.testing.assert_allclose(tiny_model.adapter.project_queries(Tensor(q)).data, ref, atol=1e-12)
