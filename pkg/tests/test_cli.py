import json

import numpy as np
import pytest

from mrovseg import io
from mrovseg.cli import main
from mrovseg.config import RunConfig, config_to_dict
from mrovseg.training import TrainConfig

from conftest import tiny_config


@pytest.fixture
def tiny_run(tmp_path):
    cfg = RunConfig(model=tiny_config(queries=8), train=TrainConfig(steps=2, batch_size=1, n_images=2,
                                                           n_classes=3))
    path = tmp_path / "cfg.json"
    path.write_text(json.dumps(config_to_dict(cfg)))
    return path


@pytest.fixture
def scene(tmp_path, rng):
    img = tmp_path / "img.ppm"
    io.write_ppm(img, rng.random((3, 32, 32)))
    classes = tmp_path / "classes.json"
    classes.write_text(json.dumps(["sky", "road", "tree"]))
    return img, classes


def _json_out(capsys):
    return json.loads(capsys.readouterr().out)


class TestDumpConfig:
    def test_seed_env(self, capsys, monkeypatch):
        monkeypatch.delenv("MROVSEG_SEED", raising=False)
        assert main(["dump-config", "--preset", "toy"]) == 0
        base = _json_out(capsys)
        monkeypatch.setenv("MROVSEG_SEED", "7")
        assert main(["dump-config", "--preset", "toy", "--p", "0.75"]) == 0
        seeded = _json_out(capsys)
        assert seeded["seeds"]["init"] == 7 and seeded["seeds"]["data"] == 7
        assert seeded["model"]["p"] == 0.75
        assert base["seeds"]["init"] != 7

    def test_bad_key_exit_2(self, tmp_path, capsys):
        bad = tmp_path / "bad.json"
        bad.write_text(json.dumps({"model": {"not_a_field": 1}}))
        assert main(["dump-config", "--config", str(bad)]) == 2
        assert "error" in capsys.readouterr().err

    def test_bad_seed_env(self, monkeypatch, capsys):
        monkeypatch.setenv("MROVSEG_SEED", "abc")
        assert main(["dump-config"]) == 2


class TestFlops:
    def test_report(self, tiny_run, capsys):
        assert main(["flops", "--config", str(tiny_run), "--n-classes", "5",
                     "--p-values", "0", "0.5"]) == 0
        rep = _json_out(capsys)["by_p"]
        assert all(r["analytic_matches_measured"] for r in rep)
        assert rep[0]["analytic_macs"]["total"] < rep[1]["analytic_macs"]["total"]


class TestGradcheck:
    def test_injected_bug_exit_3(self, capsys):
        code = main(["gradcheck", "--seeds", "1", "--only", "softmax",
                     "--inject-bug", "softmax-sign"])
        assert code == 3
        assert _json_out(capsys)["passed"] is False

    def test_clean_exit_0(self, capsys):
        assert main(["gradcheck", "--seeds", "1", "--only", "softmax", "exp"]) == 0


class TestSegment:
    def test_missing_image_exit_4(self, tmp_path, tiny_run, scene):
        _, classes = scene
        code = main(["segment", "--config", str(tiny_run), "--image", str(tmp_path / "nope.ppm"),
                     "--classes", str(classes), "--out", str(tmp_path / "o")])
        assert code == 4

    def test_deterministic(self, tmp_path, tiny_run, scene):
        img, classes = scene
        outs = []
        for k in range(2):
            out = tmp_path / f"run{k}"
            assert main(["segment", "--config", str(tiny_run), "--image", str(img),
                         "--classes", str(classes), "--out", str(out), "--mode", "panoptic",
                         "--dump-masks", str(out / "masks")]) == 0
            outs.append(out)
        a, b = (io.read_pgm(o / "label.pgm") for o in outs)
        np.testing.assert_array_equal(a, b)
        assert a.shape == (32, 32) and a.max() < 3
        ra, rb = (json.loads((o / "result.json").read_text()) for o in outs)
        assert ra == rb
        assert len(ra["queries"]) == 8
        assert (outs[0] / "panoptic.pgm").exists()


class TestTrainAndEval:
    def test_train_then_eval(self, tmp_path, tiny_run, capsys):
        out, data = tmp_path / "train", tmp_path / "data"
        assert main(["train-toy", "--config", str(tiny_run), "--out", str(out),
                     "--export-data", str(data)]) == 0
        summary = _json_out(capsys)
        assert summary["steps"] == 2
        assert summary["frozen_checksum_before"] == summary["frozen_checksum_after"]
        for name in ("log.csv", "params.json", "summary.json"):
            assert (out / name).exists()

        ck = str(out / "checkpoint")
        assert main(["eval", "--checkpoint", ck, "--data", str(data)]) == 0
        one = _json_out(capsys)
        assert main(["eval", "--checkpoint", ck, "--data", str(data), "--jobs", "2"]) == 0
        two = _json_out(capsys)
        assert one == two
        assert one["n_images"] == 2

    def test_eval_predictions(self, tmp_path, capsys):
        gt = [np.array([[0, 1], [1, 1]]), np.array([[2, 2], [0, 0]])]
        imgs = [np.zeros((3, 2, 2))] * 2
        io.write_dataset(tmp_path / "d", imgs, gt, ["a", "b", "c"])
        preds = tmp_path / "p"
        guesses = [np.array([[0, 0], [1, 1]]), np.array([[2, 2], [0, 0]])]
        for stem, g in zip(io.list_dataset(tmp_path / "d")[1], guesses):
            io.write_pgm(preds / f"{stem}.pgm", g)
        args = ["eval", "--data", str(tmp_path / "d"), "--predictions", str(preds)]
        assert main(args) == 0
        one = _json_out(capsys)
        assert main(args + ["--jobs", "2"]) == 0
        assert _json_out(capsys) == one
        # class a: 3/4, b: 2/3, c: 2/2
        assert one["miou"] == pytest.approx((3 / 4 + 2 / 3 + 1) / 3, abs=1e-12)
