import numpy as np
import pytest

import oracles
from mrovseg.errors import ShapeError
from mrovseg.tensor import Tensor


class TestMaskDecoder:
    def test_end_to_end_matches_oracle(self, tiny_model, rng):
        dec = tiny_model.decoder
        H = rng.standard_normal((8, 8, 8))
        fused = [rng.standard_normal((4, 4, 8))]
        q_f = rng.standard_normal((3, 8))
        out = dec(Tensor(H), [Tensor(f) for f in fused], Tensor(q_f))

        level = np.einsum("oc,hwc->ohw", dec.reconcile[0].data, fused[0])
        level = oracles.upsample_bilinear(level, 8, 8)
        k, b = dec.ladder[0]
        up = oracles.transposed_conv(np.concatenate([H.transpose(2, 0, 1), level]), k.data)
        cur = oracles.gelu(up + b.data[:, None, None])
        m = dec.pixel_mlp
        pix = oracles.mlp(cur.transpose(1, 2, 0).reshape(256, -1), m.fc1.weight.data,
                          m.fc1.bias.data, m.fc2.weight.data, m.fc2.bias.data).reshape(16, 16, 8)
        np.testing.assert_allclose(out.pixel.data, pix, atol=1e-10)
        np.testing.assert_allclose(out.masks.data, oracles.mask_product(q_f, pix), atol=1e-6)

    def test_mask_product_oracle(self, tiny_model, rng):
        q_f = rng.standard_normal((4, 8))
        pix = rng.standard_normal((5, 6, 8))
        masks = (Tensor(q_f) @ Tensor(pix.reshape(30, 8)).T).reshape(4, 5, 6)
        np.testing.assert_allclose(masks.data, oracles.mask_product(q_f, pix), atol=1e-6)

    def test_pyramid_levels_double(self, tiny_model, rng):
        from mrovseg.decoder import DecoderConfig, MaskDecoder
        from mrovseg.nn import ParameterStore
        dec = MaskDecoder(DecoderConfig(pyramid_width=4, pixel_hidden=6, ladder_steps=3), 8, 8,
                          ParameterStore(), rng)
        levels = dec.build_pyramid([Tensor(rng.standard_normal((2, 2, 8)))])
        assert [l.shape for l in levels] == [(4, 4, 4), (4, 8, 8), (4, 16, 16)]
        out = dec(Tensor(rng.standard_normal((2, 2, 8))), [Tensor(rng.standard_normal((2, 2, 8)))],
                  Tensor(rng.standard_normal((3, 8))))
        assert out.masks.shape == (3, 16, 16)

    def test_query_width_mismatch(self, tiny_model, rng):
        with pytest.raises(ShapeError):
            tiny_model.decoder(Tensor(rng.standard_normal((8, 8, 8))),
                               [Tensor(rng.standard_normal((4, 4, 8)))],
                               Tensor(rng.standard_normal((3, 5))))
