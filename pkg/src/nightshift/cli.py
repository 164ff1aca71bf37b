"""Command-line entry points.

    nightshift train            run the training loop from a config file
    nightshift eval             score a checkpoint against a labeled set
    nightshift gen-synthetic    render a procedural dataset to disk
    nightshift nightaug-preview apply the night augmentation to one image
    nightshift pseudo-dump      write a checkpoint's pseudo-labels as JSON
    nightshift plot             turn a metrics log into AP curve PNGs

Exit codes: 0 on success, 1 on a diagnosed failure (bad config, missing or
malformed data, numeric blow-up), 2 on usage errors.
"""

from __future__ import annotations

import argparse
import json
import logging
import os
import sys

import numpy as np

from .config import ABLATION_MODES, load_config
from .data import (
    FileDataset,
    SceneRecipe,
    SyntheticDataset,
    load_image,
    save_image,
    write_dataset,
)
from .errors import ConfigError, DataError, NumericError
from .evaluation import evaluate, evaluate_coco
from .meanteacher import BurnInContractError, load_checkpoint
from .nightaug import NightAugConfig, nightaug_pipeline
from .pseudolabel import FilterConfig, generate_pseudo_labels
from .plots import plot_metrics
from .structures import Frame, ImageTensor
from .trainer import predict_dataset, train
from .trainer import _resized_image as resized_image

log = logging.getLogger("nightshift.cli")

_HANDLED = (ConfigError, DataError, NumericError, BurnInContractError, FileNotFoundError)


def _jsonable(value):
    if isinstance(value, dict):
        return {k: _jsonable(v) for k, v in value.items()}
    if isinstance(value, (list, tuple)):
        return [_jsonable(v) for v in value]
    if isinstance(value, (np.integer,)):
        return int(value)
    if isinstance(value, (np.floating,)):
        return float(value)
    if isinstance(value, np.ndarray):
        return [_jsonable(v) for v in value.tolist()]
    return value


def _pick_model(state, which: str):
    if which == "teacher":
        return state.teacher, "teacher"
    if which == "student":
        return state.student, "student"
    if state.burned_in:
        return state.teacher, "teacher"
    return state.student, "student"


# ----- subcommand implementations -------------------------------------------


def _cmd_train(args) -> int:
    overrides = list(args.set or [])
    if args.seed is not None:
        overrides.append(f"seed={args.seed}")
    cfg = load_config(args.config, overrides, ablation=args.ablation)
    result = train(cfg, args.out)
    summary = {
        "out_dir": result.out_dir,
        "final_checkpoint": result.final_checkpoint,
        "metrics": result.metrics_path,
        "final_mean_ap": result.final_ap50,
        "peak_mean_ap": result.peak_ap50,
    }
    print(json.dumps(_jsonable(summary), indent=2))
    return 0


def _cmd_eval(args) -> int:
    state = load_checkpoint(args.ckpt)
    model, which = _pick_model(state, args.model)
    model.eval()
    dataset = FileDataset(args.data, args.image_root)
    dets, gts = predict_dataset(model, dataset, args.resize)
    if args.iou == "coco":
        result = evaluate_coco(dets, gts)
    else:
        result = evaluate(dets, gts, float(args.iou))
    doc = result.to_dict()
    doc["model"] = which
    doc["checkpoint"] = args.ckpt
    text = json.dumps(_jsonable(doc), indent=2, sort_keys=True)
    if args.out:
        with open(args.out, "w", encoding="utf-8") as fh:
            fh.write(text + "\n")
        log.info("wrote %s", args.out)
    print(text)
    return 0


def _cmd_gen_synthetic(args) -> int:
    if args.recipe:
        with open(args.recipe, encoding="utf-8") as fh:
            recipe = SceneRecipe.from_dict(json.load(fh))
    else:
        recipe = SceneRecipe()
    if args.seed is not None:
        recipe = SceneRecipe.from_dict({**recipe.to_dict(), "seed": args.seed})
    recipe.validate()

    def build(domain: str, prefix: str) -> SyntheticDataset:
        return SyntheticDataset(
            recipe, args.count, domain, stream=args.stream,
            labeled=not args.unlabeled, id_prefix=prefix,
        )

    if args.domain == "paired":
        for domain in ("day", "night"):
            sub = os.path.join(args.out, domain)
            path = write_dataset(sub, build(domain, domain), unlabeled=args.unlabeled)
            print(path)
    else:
        path = write_dataset(
            args.out, build(args.domain, args.domain), unlabeled=args.unlabeled
        )
        print(path)
    return 0


def _cmd_nightaug_preview(args) -> int:
    pixels = load_image(args.input)
    stem = os.path.splitext(os.path.basename(args.input))[0]
    image = ImageTensor(pixels, Frame(stem, 1.0))
    cfg = NightAugConfig()
    rng = np.random.default_rng(args.seed)
    os.makedirs(args.out, exist_ok=True)
    traces = []
    for i in range(args.count):
        trace: list[dict] = []
        out = nightaug_pipeline(image, cfg, rng, trace)
        path = os.path.join(args.out, f"{stem}_aug{i:02d}.png")
        save_image(path, out.pixels)
        traces.append({"file": os.path.basename(path), "steps": trace})
        print(path)
    trace_path = os.path.join(args.out, f"{stem}_trace.json")
    with open(trace_path, "w", encoding="utf-8") as fh:
        json.dump(_jsonable({"seed": args.seed, "variants": traces}), fh, indent=2)
        fh.write("\n")
    print(trace_path)
    return 0


def _cmd_pseudo_dump(args) -> int:
    state = load_checkpoint(args.ckpt)
    model, which = _pick_model(state, args.model)
    model.eval()
    dataset = FileDataset(args.data, args.image_root)
    cfg = FilterConfig(tau=args.tau, nms_iou=args.nms_iou)
    images, annotations = [], []
    ann_id = 1
    for i in range(len(dataset)):
        sample = dataset[i]
        image = resized_image(sample.image, args.resize)
        pseudo = generate_pseudo_labels(model, image, cfg, iteration=state.iteration)
        images.append(
            {"id": sample.image_id, "width": image.width, "height": image.height}
        )
        boxes = pseudo.labels
        for row in range(len(boxes)):
            x1, y1, x2, y2 = (float(v) for v in boxes.xyxy[row])
            annotations.append(
                {
                    "id": ann_id,
                    "image_id": sample.image_id,
                    "category_id": int(boxes.class_ids[row]),
                    "bbox": [x1, y1, x2 - x1, y2 - y1],
                    "score": float(boxes.scores[row]),
                }
            )
            ann_id += 1
    doc = {
        "images": images,
        "annotations": annotations,
        "categories": [
            {"id": i, "name": n} for i, n in sorted(dataset.categories.items())
        ],
        "params": {
            "tau": args.tau,
            "nms_iou": args.nms_iou,
            "model": which,
            "checkpoint": args.ckpt,
            "resize": args.resize,
        },
    }
    with open(args.out, "w", encoding="utf-8") as fh:
        json.dump(_jsonable(doc), fh, indent=2)
        fh.write("\n")
    print(args.out)
    return 0


def _cmd_plot(args) -> int:
    for path in plot_metrics(args.log, args.out):
        print(path)
    return 0


# ----- parser ----------------------------------------------------------------


def build_parser() -> argparse.ArgumentParser:
    parser = argparse.ArgumentParser(
        prog="nightshift",
        description="day-to-night domain adaptation for a tiny two-stage detector",
    )
    sub = parser.add_subparsers(dest="command", required=True)

    p = sub.add_parser("train", help="run the training loop from a config file")
    p.add_argument("--config", required=True, help="JSON config file")
    p.add_argument("--out", required=True, help="output directory")
    p.add_argument(
        "--ablation",
        choices=sorted(ABLATION_MODES),
        default=None,
        help="named ablation preset overriding the config's flags",
    )
    p.add_argument(
        "--set",
        action="append",
        metavar="KEY.PATH=JSON",
        help="config override, repeatable (e.g. --set train.seed=3)",
    )
    p.add_argument("--seed", type=int, default=None, help="shortcut for --set seed=N")
    p.set_defaults(fn=_cmd_train)

    p = sub.add_parser("eval", help="score a checkpoint against a labeled dataset")
    p.add_argument("--ckpt", required=True, help="checkpoint blob (.pt)")
    p.add_argument("--data", required=True, help="annotation JSON")
    p.add_argument("--image-root", default=None, help="image directory (default: alongside annotations)")
    p.add_argument("--iou", default="0.5", help="IoU threshold, or 'coco' for the 0.5:0.05:0.95 average")
    p.add_argument("--model", choices=("auto", "teacher", "student"), default="auto")
    p.add_argument("--resize", type=int, default=128, help="shorter-side resize target")
    p.add_argument("--out", default=None, help="also write the result JSON here")
    p.set_defaults(fn=_cmd_eval)

    p = sub.add_parser("gen-synthetic", help="render a procedural dataset to disk")
    p.add_argument("--out", required=True, help="output directory")
    p.add_argument("--count", type=int, default=100, help="number of scenes")
    p.add_argument("--domain", choices=("day", "night", "paired"), default="day")
    p.add_argument("--recipe", default=None, help="scene recipe JSON (default recipe if omitted)")
    p.add_argument("--seed", type=int, default=None, help="override the recipe seed")
    p.add_argument("--stream", type=int, default=0, help="substream index for split separation")
    p.add_argument("--unlabeled", action="store_true", help="omit the annotations block")
    p.set_defaults(fn=_cmd_gen_synthetic)

    p = sub.add_parser("nightaug-preview", help="apply the night augmentation to one image")
    p.add_argument("--input", required=True, help="input image file")
    p.add_argument("--out", required=True, help="output directory")
    p.add_argument("--count", type=int, default=4, help="number of variants")
    p.add_argument("--seed", type=int, default=0)
    p.set_defaults(fn=_cmd_nightaug_preview)

    p = sub.add_parser("pseudo-dump", help="write a checkpoint's pseudo-labels as JSON")
    p.add_argument("--ckpt", required=True, help="checkpoint blob (.pt)")
    p.add_argument("--data", required=True, help="annotation JSON (labels ignored)")
    p.add_argument("--image-root", default=None)
    p.add_argument("--out", required=True, help="output JSON path")
    p.add_argument("--tau", type=float, default=0.8, help="confidence threshold")
    p.add_argument("--nms-iou", type=float, default=0.5, help="class-aware NMS IoU")
    p.add_argument("--model", choices=("auto", "teacher", "student"), default="auto")
    p.add_argument("--resize", type=int, default=128, help="shorter-side resize target")
    p.set_defaults(fn=_cmd_pseudo_dump)

    p = sub.add_parser("plot", help="turn a metrics log into AP curve PNGs")
    p.add_argument("--log", required=True, help="metrics.jsonl from a training run")
    p.add_argument("--out", required=True, help="output directory for PNGs")
    p.set_defaults(fn=_cmd_plot)

    return parser


def dispatch(argv: list[str] | None = None) -> int:
    logging.basicConfig(
        level=logging.INFO, format="%(asctime)s %(name)s %(message)s"
    )
    parser = build_parser()
    args = parser.parse_args(argv)
    try:
        return args.fn(args)
    except _HANDLED as e:
        print(f"error: {e}", file=sys.stderr)
        return 1


def main() -> None:
    sys.exit(dispatch(sys.argv[1:]))


if __name__ == "__main__":
    main()
