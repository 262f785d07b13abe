import numpy as np
import pytest

from mrovseg.adapter import AdapterConfig
from mrovseg.backbone import BackboneConfig
from mrovseg.classifier import ClassifierConfig
from mrovseg.decoder import DecoderConfig
from mrovseg.model import ModelConfig, MROVSeg
from mrovseg.tensor import default_dtype


def tiny_config(p=0.5, seed=0, **adapter_kw) -> ModelConfig:
    """32x32 model small enough for loop oracles and finite differences."""
    return ModelConfig(
        image_size=(32, 32), p=p, init_seed=seed,
        backbone=BackboneConfig(patch=4, dim=16, heads=2, depth=3, tap_layers=("stem", 1, 2, 3),
                                cls_tap=2, native_window=16, embed_dim=8, seed=seed),
        adapter=AdapterConfig(**{"blocks": 2, "heads": 2, "dim": 8, "queries": 3,
                                 "fusion_layers": ("stem", 2), **adapter_kw}),
        decoder=DecoderConfig(pyramid_width=4, pixel_hidden=6, ladder_steps=1),
        classifier=ClassifierConfig(text_heads=2))


@pytest.fixture
def rng():
    return np.random.default_rng(1234)


@pytest.fixture
def f64():
    with default_dtype(np.float64):
        yield


@pytest.fixture
def tiny_model(f64):
    return MROVSeg(tiny_config())


@pytest.fixture
def tiny_image(rng):
    return rng.random((3, 32, 32))


# one line per acceptance criterion, echoed in the terminal summary
ACCEPTANCE: list[str] = []


@pytest.fixture
def verdict(capsys):
    """Record ``PASS``/``FAIL`` for a criterion, print it, then assert."""
    def record(name: str, ok: bool, detail: str = "") -> None:
        line = f"{'PASS' if ok else 'FAIL'} {name}" + (f" | {detail}" if detail else "")
        ACCEPTANCE.append(line)
        with capsys.disabled():
            print("\n" + line)
        assert ok, line
    return record


def pytest_terminal_summary(terminalreporter):
    if ACCEPTANCE:
        terminalreporter.section("acceptance criteria")
        for line in ACCEPTANCE:
            terminalreporter.write_line(line)
