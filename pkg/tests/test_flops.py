import numpy as np
import pytest

from conftest import tiny_config
from mrovseg.config import default_config, toy_config
from mrovseg.flops import (analytic_macs, cost_report, masked_attention_layer_macs,
                           measured_macs, parameter_report)
from mrovseg.model import MROVSeg


def hand_masked_attention(n, l, g, d, layers):
    """Scores and weighted values N*K*D each, k/v over K keys, q/out and a 4x MLP over N."""
    k = l + g
    per_layer = n * k * d + n * k * d + 2 * k * d * d + 2 * n * d * d + 2 * 4 * n * d * d
    return per_layer * layers


class TestClosedForms:
    def test_layer_formula(self):
        assert masked_attention_layer_macs(2, 3, 4) == 2 * 2 * 3 * 4 + 2 * 3 * 16 + 10 * 2 * 16

    def test_toy_config(self):
        cfg = toy_config().model
        got = analytic_macs(cfg, 4)["masked_attention"]
        assert got == hand_masked_attention(20, 64, 256, 192, 2)
        assert got == measured_macs(MROVSeg(cfg), 4)["masked_attention"]

    def test_tiny_overlapped_config(self):
        cfg = tiny_config(p=0.75)
        got = analytic_macs(cfg, 3)["masked_attention"]
        assert got == hand_masked_attention(3, 16, 64, 16, 1)
        assert got == measured_macs(MROVSeg(cfg), 3)["masked_attention"]

    def test_default_config_analytic(self):
        cfg = default_config().model
        assert analytic_macs(cfg, 150)["masked_attention"] == \
            hand_masked_attention(100, 400, 1600, 768, 3)

    @pytest.mark.parametrize("p", [0.0, 0.5, 0.75])
    def test_all_modules_match_counter(self, p):
        cfg = tiny_config(p=p)
        analytic, measured = analytic_macs(cfg, 3), measured_macs(MROVSeg(cfg), 3)
        for key, value in measured.items():
            assert analytic[key] == value, key

    def test_multires_costs_more(self):
        lo = analytic_macs(tiny_config(p=0.0), 3)["total"]
        hi = analytic_macs(tiny_config(p=0.5), 3)["total"]
        assert lo < hi


class TestParameters:
    def test_categories_partition_trainable(self):
        model = MROVSeg(tiny_config())
        rep = parameter_report(model)
        assert "Other" not in rep
        parts = [v for k, v in rep.items() if k not in ("Total trainable", "Frozen backbone")]
        assert sum(parts) == rep["Total trainable"]
        assert rep["Frozen backbone"] == sum(model.store[n].data.size for n in model.store.frozen)

    def test_report_flags_match(self):
        rep = cost_report(MROVSeg(tiny_config()), 3)
        assert rep["analytic_matches_measured"]
