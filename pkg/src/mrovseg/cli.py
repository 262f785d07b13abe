"""Command-line entry point: ``mrovseg <subcommand> ...``."""

from __future__ import annotations

import argparse
import logging
import sys
import time
from concurrent.futures import ThreadPoolExecutor
from pathlib import Path
from typing import Optional, Sequence

import numpy as np

from . import io
from .config import PRESETS, RunConfig, config_from_dict, config_to_dict
from .errors import (ConfigError, ContractError, IOFailure, LayoutError, MROVSegError,
                     NumericError, ShapeError)
from .flops import cost_report, parameter_report
from .geometry import check_image, slice_image
from .gradsuite import run_suite
from .metrics import ConfusionAccumulator, PQAccumulator, segments_from_map
from .model import MROVSeg
from .text import TEMPLATES, load_templates
from .training import Trainer, class_names, make_toy_dataset

logger = logging.getLogger("mrovseg")

EXIT_OK, EXIT_CONFIG, EXIT_NUMERIC, EXIT_IO = 0, 2, 3, 4


# ---------------------------------------------------------------------------
# helpers
# ---------------------------------------------------------------------------

def load_config(args) -> RunConfig:
    """Preset, then JSON file, then checkpoint manifest config (if no file), then flags."""
    if args.config:
        cfg = config_from_dict(io.read_json(args.config))
    elif getattr(args, "checkpoint", None):
        manifest = io.read_manifest(args.checkpoint)
        if "config" not in manifest:
            raise ConfigError(f"checkpoint {args.checkpoint} carries no config; pass --config")
        cfg = config_from_dict(manifest["config"])
    else:
        cfg = config_from_dict(config_to_dict(PRESETS[args.preset]()))
    if getattr(args, "p", None) is not None:
        cfg.model.p = args.p
        cfg.model.__post_init__()
    if getattr(args, "checkpoint", None):
        cfg.checkpoint = args.checkpoint
    if getattr(args, "templates", None):
        cfg.templates = args.templates
    return cfg


def build_model(cfg: RunConfig) -> MROVSeg:
    model = MROVSeg(cfg.model)
    if cfg.checkpoint:
        io.load_checkpoint(cfg.checkpoint, model.store)
    return model


def templates_for(cfg: RunConfig):
    return load_templates(cfg.templates) if cfg.templates else TEMPLATES


def _print_json(obj) -> None:
    sys.stdout.write(io.dumps_json(obj))


# ---------------------------------------------------------------------------
# subcommands
# ---------------------------------------------------------------------------

def cmd_dump_config(args) -> int:
    _print_json(config_to_dict(load_config(args)))
    return EXIT_OK


def cmd_segment(args) -> int:
    cfg = load_config(args)
    names = io.read_vocabulary(args.classes)
    img = check_image(io.read_ppm(args.image))
    model = build_model(cfg)
    out_dir = Path(args.out or cfg.output_dir)
    if args.dump_slices and model.layout is not None:
        io.dump_slices(args.dump_slices, slice_image(img, model.layout))
    seg = model.segment(img, names, mode=args.mode, templates=templates_for(cfg))
    io.write_pgm(out_dir / "label.pgm", seg.label_map)
    if args.dump_masks:
        io.dump_masks(args.dump_masks, seg.mask_logits)
    result = {"classes": names, "mode": args.mode, "queries": _query_records(seg)}
    if seg.panoptic_map is not None:
        io.write_pgm(out_dir / "panoptic.pgm", np.minimum(seg.panoptic_map, 255))
        result["segments"] = seg.segments
    io.write_json(out_dir / "result.json", result)
    return EXIT_OK


def _query_records(seg) -> list[dict]:
    c = seg.class_logits
    z = np.exp(c - c.max(axis=1, keepdims=True))
    prob = z / z.sum(axis=1, keepdims=True)
    k = len(seg.class_names)
    area = (seg.mask_logits > 0).reshape(len(c), -1).sum(axis=1)
    recs = []
    for n in range(len(c)):
        best = int(prob[n, :k].argmax())
        recs.append({"query": n, "class": best, "class_name": seg.class_names[best],
                     "score": round(float(prob[n, best]), 6),
                     "no_object": round(float(prob[n, k:].sum()), 6), "area": int(area[n])})
    return recs


def cmd_train_toy(args) -> int:
    cfg = load_config(args)
    if args.steps is not None:
        cfg.train.steps = args.steps
    out_dir = Path(args.out or cfg.output_dir)
    out_dir.mkdir(parents=True, exist_ok=True)
    tc = cfg.train
    names = class_names(tc.n_classes)
    data = make_toy_dataset(tc.data_seed, tc.n_images, cfg.model.image_size, tc.n_classes)
    if args.export_data:
        io.write_dataset(args.export_data, [s.image for s in data],
                         [s.semantic_map() for s in data], names,
                         [_instance_map(s) for s in data])
    model = build_model(cfg)
    before = model.store.checksum()
    trainer = Trainer(model, tc, data, names)
    t0 = time.perf_counter()
    try:
        result = trainer.fit(log_path=out_dir / "log.csv")
    except NumericError:
        # keep the state that produced the non-finite value for inspection
        io.save_checkpoint(out_dir / "failed_state", model.store, config_to_dict(cfg))
        raise
    io.save_checkpoint(out_dir / "checkpoint", model.store, config_to_dict(cfg))
    io.write_json(out_dir / "params.json", parameter_report(model))
    summary = {
        "steps": tc.steps,
        "initial_loss": result.losses[0],
        "final_loss": result.losses[-1],
        "train_miou": result.train_miou,
        "seconds": round(time.perf_counter() - t0, 2),
        "frozen_checksum_before": before,
        "frozen_checksum_after": model.store.checksum(),
        "data_seed": tc.data_seed,
        "init_seed": cfg.model.init_seed,
    }
    io.write_json(out_dir / "summary.json", summary)
    _print_json(summary)
    return EXIT_OK


def _instance_map(sample) -> np.ndarray:
    out = np.zeros(sample.image.shape[1:], dtype=np.int64)
    for i, (_, m) in enumerate(sample.instances, start=1):
        out[m] = i
    return out


def cmd_gradcheck(args) -> int:
    seeds = tuple(range(args.seeds))
    results = run_suite(seeds=seeds, inject=args.inject_bug, only=args.only or None)
    report = {"seeds": list(seeds), "ops": [r.to_dict() for r in results],
              "passed": all(r.passed for r in results)}
    _print_json(report)
    return EXIT_OK if report["passed"] else EXIT_NUMERIC


def cmd_flops(args) -> int:
    cfg = load_config(args)
    ps = args.p_values or [cfg.model.p]
    reports = []
    for p in ps:
        cfg.model.p = p
        cfg.model.__post_init__()
        reports.append(cost_report(MROVSeg(cfg.model), args.n_classes, measure=not args.no_measure))
    _print_json(reports[0] if len(reports) == 1 else {"by_p": reports})
    return EXIT_OK


def _eval_shard(model, names, data_dir: Path, stems, mode, templates, pred_dir):
    sem = ConfusionAccumulator(len(names))
    pq = PQAccumulator()
    text = model.embed_text(names, templates) if model is not None else None
    for stem in stems:
        gt = io.read_pgm(data_dir / "labels" / f"{stem}.pgm")
        if pred_dir is not None:
            pred = io.read_pgm(Path(pred_dir) / f"{stem}.pgm")
            sem.update(pred, gt)
            continue
        img = check_image(io.read_ppm(data_dir / "images" / f"{stem}.ppm"))
        seg = model.segment(img, names, mode=mode, text=text)
        sem.update(seg.label_map, gt)
        if mode == "panoptic":
            inst = io.read_pgm(data_dir / "instances" / f"{stem}.pgm")
            gt_segs = [(0, inst == 0)] if (inst == 0).any() else []
            for i in np.unique(inst[inst > 0]):
                m = inst == i
                gt_segs.append((int(np.bincount(gt[m]).argmax()), m))
            pq.update(segments_from_map(seg.panoptic_map, seg.segments), gt_segs)
    return sem, pq


def cmd_eval(args) -> int:
    data_dir = Path(args.data)
    names, stems = io.list_dataset(data_dir)
    model = None
    templates = TEMPLATES
    if args.predictions is None:
        cfg = load_config(args)
        model = build_model(cfg)
        templates = templates_for(cfg)
    jobs = max(1, args.jobs)
    shards = [stems[i::jobs] for i in range(jobs)]
    work = lambda s: _eval_shard(model, names, data_dir, s, args.mode, templates, args.predictions)
    if jobs == 1:
        parts = [work(shards[0])]
    else:
        with ThreadPoolExecutor(max_workers=jobs) as pool:
            parts = list(pool.map(work, shards))
    sem, pq = parts[0]
    for s, q in parts[1:]:
        sem, pq = sem.merge(s), pq.merge(q)
    res = sem.miou()
    report = {"n_images": len(stems), "mode": args.mode, **res.to_dict()}
    if res.per_class_iou:
        report["per_class_iou"] = {names[int(k)]: v for k, v in res.per_class_iou.items()}
    if args.mode == "panoptic" and model is not None:
        report.update(pq.result().to_dict())
    if args.out:
        io.write_json(args.out, report)
    _print_json(report)
    return EXIT_OK


# ---------------------------------------------------------------------------
# argument parsing
# ---------------------------------------------------------------------------

def _common(p: argparse.ArgumentParser, checkpoint: bool = True) -> None:
    p.add_argument("--config", help="run configuration JSON")
    p.add_argument("--preset", choices=sorted(PRESETS), default="default",
                   help="built-in configuration used when --config is absent")
    p.add_argument("--p", type=float, help="override the crop ratio")
    if checkpoint:
        p.add_argument("--checkpoint", help="checkpoint directory to load")
    p.add_argument("--templates", help="prompt template file, one template per line")


def build_parser() -> argparse.ArgumentParser:
    parser = argparse.ArgumentParser(prog="mrovseg", description=__doc__)
    parser.add_argument("-v", "--verbose", action="store_true")
    sub = parser.add_subparsers(dest="command", required=True)

    p = sub.add_parser("segment", help="segment one PPM image")
    _common(p)
    p.add_argument("--image", required=True)
    p.add_argument("--classes", required=True, help="JSON array of class names")
    p.add_argument("--out", help="output directory (label.pgm, result.json)")
    p.add_argument("--mode", choices=("semantic", "panoptic"), default="semantic")
    p.add_argument("--dump-slices", help="write slice crops as tensor files here")
    p.add_argument("--dump-masks", help="write per-query mask probabilities as PGM here")
    p.set_defaults(func=cmd_segment)

    p = sub.add_parser("train-toy", help="train on the synthetic dataset")
    _common(p)
    p.add_argument("--out", help="output directory")
    p.add_argument("--steps", type=int)
    p.add_argument("--export-data", help="also write the training set as an eval dataset")
    p.set_defaults(func=cmd_train_toy)

    p = sub.add_parser("gradcheck", help="finite-difference gradient suite")
    p.add_argument("--seeds", type=int, default=5)
    p.add_argument("--only", nargs="*", help="restrict to these case names")
    p.add_argument("--inject-bug", choices=("softmax-sign",),
                   help="plant a known gradient bug to confirm the suite catches it")
    p.set_defaults(func=cmd_gradcheck)

    p = sub.add_parser("flops", help="MAC and parameter report")
    _common(p, checkpoint=False)
    p.add_argument("--n-classes", type=int, default=150)
    p.add_argument("--p-values", type=float, nargs="*", help="report several crop ratios")
    p.add_argument("--no-measure", action="store_true", help="closed forms only")
    p.set_defaults(func=cmd_flops)

    p = sub.add_parser("eval", help="evaluate on a dataset directory")
    _common(p)
    p.add_argument("--data", required=True)
    p.add_argument("--mode", choices=("semantic", "panoptic"), default="semantic")
    p.add_argument("--predictions", help="directory of predicted label PGMs (skips the model)")
    p.add_argument("--jobs", type=int, default=1)
    p.add_argument("--out", help="write the metrics JSON here too")
    p.set_defaults(func=cmd_eval)

    p = sub.add_parser("dump-config", help="print the resolved configuration")
    _common(p, checkpoint=False)
    p.set_defaults(func=cmd_dump_config)
    return parser


def main(argv: Optional[Sequence[str]] = None) -> int:
    parser = build_parser()
    args = parser.parse_args(argv)
    logging.basicConfig(level=logging.INFO if args.verbose else logging.WARNING,
                        format="%(levelname)s %(name)s: %(message)s")
    try:
        return args.func(args)
    except (ConfigError, ContractError, ShapeError, LayoutError) as exc:
        print(f"error: {exc}", file=sys.stderr)
        return EXIT_CONFIG
    except NumericError as exc:
        print(f"numeric failure: {exc}", file=sys.stderr)
        return EXIT_NUMERIC
    except IOFailure as exc:
        print(f"I/O error: {exc}", file=sys.stderr)
        return EXIT_IO
    except MROVSegError as exc:
        print(f"error: {exc}", file=sys.stderr)
        return EXIT_CONFIG


if __name__ == "__main__":
    sys.exit(main())
