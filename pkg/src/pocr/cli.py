"""Command-line surface: synth, train-*, prune, quantize, infer, eval-*.

Configs are key=value text files ('#' comments); unknown keys are rejected
so misspellings never fall back to silent defaults.  Every command is
deterministic under a fixed seed.  Exit codes: 0 success, 2 config error,
3 data error, 4 model error.
"""

from __future__ import annotations

import argparse
import json
import os
import sys

import numpy as np

from . import bundle as bd
from . import metrics as mx
from . import report as rp
from . import slim
from . import synthgen as sg
from . import train as tr
from . import trainkit as tk
from .detdb import DetHeadConfig, DetModel
from .nnblocks import BackboneConfig, StridePlan
from .pipeline import infer as pipeline_infer
from .rectify import ClsModel
from .reccrnn import LabelCodec, RecHeadConfig, RecModel


class ConfigError(ValueError):
    pass


class DataError(ValueError):
    pass


class ModelError(ValueError):
    pass


EXIT_CODES = {ConfigError: 2, DataError: 3, ModelError: 4}


def _parse_bool(text: str) -> bool:
    low = text.strip().lower()
    if low in ("1", "true", "yes", "on"):
        return True
    if low in ("0", "false", "no", "off"):
        return False
    raise ConfigError(f"not a boolean: {text!r}")


def read_config(sources, schema: dict) -> dict:
    """Merge config sources (file paths or literal key=value) against a
    schema of {key: (caster, default)}; unknown keys are an error."""
    values = {k: default for k, (_, default) in schema.items()}
    pairs = []
    for src in sources or []:
        if os.path.isfile(src):
            with open(src) as fh:
                for ln, line in enumerate(fh, 1):
                    line = line.split("#", 1)[0].strip()
                    if not line:
                        continue
                    if "=" not in line:
                        raise ConfigError(
                            f"{src}:{ln}: expected key=value, got {line!r}")
                    key, val = line.split("=", 1)
                    pairs.append((key.strip(), val.strip()))
        elif "=" in src:
            key, val = src.split("=", 1)
            pairs.append((key.strip(), val.strip()))
        else:
            raise ConfigError(f"config source {src!r} is neither a file "
                              "nor a key=value assignment")
    for key, val in pairs:
        if key not in schema:
            raise ConfigError(f"unknown config key {key!r} "
                              f"(known: {', '.join(sorted(schema))})")
        caster = schema[key][0]
        try:
            values[key] = _parse_bool(val) if caster is bool else caster(val)
        except ConfigError:
            raise
        except ValueError as exc:
            raise ConfigError(f"bad value for {key}: {val!r} ({exc})")
    return values


# ---------------------------------------------------------------------------
# shared schemas and helpers


_TRAIN_KEYS = {
    "lr0": (float, 0.001),
    "warmup_steps": (int, -1),  # -1: default fraction of total_steps
    "total_steps": (int, 1000),
    "batch_size": (int, 8),
    "l2_decay": (float, 1e-5),
    "eval_every": (int, 0),
    "use_bda": (bool, True),
    "use_tia": (bool, False),
    "use_randaug": (bool, False),
    "use_erasing": (bool, False),
    "use_cosine": (bool, True),
    "use_warmup": (bool, True),
    "use_l2": (bool, True),
}

_BACKBONE_KEYS = {
    "width": (float, 0.5),
    "use_se": (bool, True),
}


def _train_config(cfg: dict, seed: int, recipe: str) -> tk.TrainConfig:
    warmup = cfg["warmup_steps"]
    if warmup < 0:
        warmup = tk.default_warmup(cfg["total_steps"])
    return tk.TrainConfig(cfg["lr0"], warmup, cfg["total_steps"],
                          cfg["batch_size"], cfg["l2_decay"], seed, recipe)


def _flags(cfg: dict) -> tr.StrategyFlags:
    return tr.StrategyFlags(cfg["use_bda"], cfg["use_tia"],
                            cfg["use_randaug"], cfg["use_erasing"],
                            cfg["use_cosine"], cfg["use_warmup"],
                            cfg["use_l2"])


def _load_model(path: str, kind: str):
    if not path or not os.path.isfile(path):
        raise ModelError(f"model bundle not found: {path!r}")
    try:
        model, manifest = bd.load_model(path)
    except bd.BundleError as exc:
        raise ModelError(f"{path}: {exc}")
    if manifest["kind"] != kind:
        raise ModelError(f"{path} holds a {manifest['kind']!r} model, "
                         f"expected {kind!r}")
    return model, manifest


def _require_dir(path: str, what: str) -> str:
    if not path:
        raise DataError(f"--{what} is required for this command")
    if not os.path.isdir(path):
        raise DataError(f"--{what} directory not found: {path!r}")
    return path


def _finish_training(args, kind, model, history, alphabet="",
                     quant_records=None, prune_plan=None):
    os.makedirs(args.out, exist_ok=True)
    bundle_path = os.path.join(args.out, "model.pocr")
    bd.save_model(bundle_path, kind, model, alphabet=alphabet,
                  seed=args.seed, quant_records=quant_records,
                  prune_plan=prune_plan)
    log_path = os.path.join(args.out, "log.jsonl")
    with open(log_path, "w") as fh:
        for row in history:
            fh.write(json.dumps(row, sort_keys=True) + "\n")
    rp.training_report(history, args.out)
    print(f"bundle\t{bundle_path}")
    print(f"log\t{log_path}")


# ---------------------------------------------------------------------------
# commands


def cmd_synth(args):
    schema = {
        "kind": (str, "det"),
        "n_pages": (int, 50),
        "n_lines": (int, 500),
        "lines_per_page": (int, 5),
        "alphabet": (str, sg.ALPHABET),
        "min_len": (int, 1),
        "max_len": (int, 8),
        "plain": (bool, False),
    }
    cfg = read_config(args.config, schema)
    if cfg["kind"] not in ("det", "rec", "cls"):
        raise ConfigError(f"kind must be det|rec|cls, got {cfg['kind']!r}")
    os.makedirs(args.out, exist_ok=True)
    if cfg["kind"] == "det":
        path = sg.write_det_dataset(args.out, cfg["n_pages"],
                                    cfg["lines_per_page"], args.seed,
                                    cfg["alphabet"])
    elif cfg["kind"] == "rec":
        path = sg.write_rec_dataset(args.out, cfg["n_lines"], args.seed,
                                    cfg["alphabet"], cfg["min_len"],
                                    cfg["max_len"], plain=cfg["plain"])
    else:
        path = sg.write_cls_dataset(args.out, cfg["n_lines"], args.seed,
                                    cfg["alphabet"])
    print(f"labels\t{path}")


def cmd_train_det(args):
    schema = dict(_TRAIN_KEYS, **_BACKBONE_KEYS,
                  inner_channels=(int, 24), crop=(int, 128))
    cfg = read_config(args.config, schema)
    pages = sg.read_det_dataset(_require_dir(args.data, "data"))
    val = sg.read_det_dataset(args.val) if args.val else None
    if args.init:
        model, _ = _load_model(args.init, "det")
    else:
        bb = BackboneConfig(cfg["width"], StridePlan.detection(),
                            use_se_globally=cfg["use_se"])
        model = DetModel(bb, DetHeadConfig(cfg["inner_channels"]),
                         rng=np.random.default_rng(args.seed))
    config = _train_config(cfg, args.seed, "detector")
    history = tr.train_detector(pages, model, config, _flags(cfg),
                                crop=cfg["crop"], val_pages=val,
                                eval_every=cfg["eval_every"])
    _finish_training(args, "det", model, history)


def cmd_train_rec(args):
    schema = dict(_TRAIN_KEYS, **_BACKBONE_KEYS, seq_dim=(int, 40),
                  hidden=(int, 32), alphabet=(str, sg.ALPHABET))
    cfg = read_config(args.config, schema)
    samples = sg.read_rec_dataset(_require_dir(args.data, "data"))
    val = sg.read_rec_dataset(args.val) if args.val else None
    if args.init:
        model, manifest = _load_model(args.init, "rec")
        alphabet = manifest["alphabet"] or cfg["alphabet"]
    else:
        alphabet = cfg["alphabet"]
        codec = LabelCodec(alphabet)
        bb = BackboneConfig(cfg["width"], StridePlan.recognition((1, 1)),
                            use_se_globally=cfg["use_se"])
        model = RecModel(RecHeadConfig(cfg["seq_dim"], cfg["hidden"],
                                       codec.vocab_size), bb,
                         rng=np.random.default_rng(args.seed))
    codec = LabelCodec(alphabet)
    bad = [t for _, t in samples if any(ch not in alphabet for ch in t)]
    if bad:
        raise DataError(f"{len(bad)} transcripts use symbols outside the "
                        f"alphabet (e.g. {bad[0]!r})")
    config = _train_config(cfg, args.seed, "recognizer")
    history = tr.train_recognizer(samples, codec, model, config, _flags(cfg),
                                  val_samples=val,
                                  eval_every=cfg["eval_every"])
    _finish_training(args, "rec", model, history, alphabet=alphabet)


def cmd_train_cls(args):
    schema = dict(_TRAIN_KEYS, **_BACKBONE_KEYS)
    cfg = read_config(args.config, schema)
    samples = sg.read_cls_dataset(_require_dir(args.data, "data"))
    val = sg.read_cls_dataset(args.val) if args.val else None
    if args.init:
        model, _ = _load_model(args.init, "cls")
    else:
        bb = BackboneConfig(cfg["width"], StridePlan.classification(),
                            use_se_globally=cfg["use_se"])
        model = ClsModel(bb, rng=np.random.default_rng(args.seed))
    config = _train_config(cfg, args.seed, "classifier")
    history = tr.train_classifier(samples, model, config, _flags(cfg),
                                  val_samples=val,
                                  eval_every=cfg["eval_every"])
    _finish_training(args, "cls", model, history)


def cmd_prune(args):
    schema = dict(_TRAIN_KEYS, ratio=(float, 0.3))
    cfg = read_config(args.config, schema)
    if not 0.0 <= cfg["ratio"] < 1.0:
        raise ConfigError(f"ratio must be in [0, 1), got {cfg['ratio']}")
    model, manifest = _load_model(args.init, "det")
    units = slim.prune_units(model)
    plan = slim.PrunePlan([
        (unit.name, [int(i) for i in
                     slim.fpgm_select(unit.conv.weight.data, cfg["ratio"])])
        for unit in units], global_ratio=cfg["ratio"])
    before = sum(p.data.size for p in model.params())
    pruned = slim.apply_prune(model, plan)
    after = sum(p.data.size for p in pruned.params())
    history = []
    if cfg["total_steps"] > 0:
        pages = sg.read_det_dataset(_require_dir(args.data, "data"))
        config = _train_config(cfg, args.seed, "detector")
        history = tr.train_detector(pages, pruned, config, _flags(cfg))
    _finish_training(args, "det", pruned, history,
                     alphabet=manifest.get("alphabet", ""), prune_plan=plan)
    print(f"params\t{before}\t{after}\t{1 - after / before:.4f}")


def cmd_quantize(args):
    schema = dict(_TRAIN_KEYS, bits=(int, 8), alpha_init=(float, 6.0))
    cfg = read_config(args.config, schema)
    model, manifest = _load_model(args.init, "rec")
    alphabet = manifest["alphabet"]
    if not alphabet:
        raise ModelError(f"{args.init} has no alphabet in its manifest")
    codec = LabelCodec(alphabet)
    model, records = slim.quantize_model(model, bits=cfg["bits"],
                                         alpha_init=cfg["alpha_init"])
    history = []
    if cfg["total_steps"] > 0:
        samples = sg.read_rec_dataset(_require_dir(args.data, "data"))
        config = _train_config(cfg, args.seed, "recognizer")
        pact_params = [r.pact_param for r in records
                       if r.pact_param is not None]
        alphas = [p.alpha for p in pact_params]
        history = tr.train_recognizer(
            samples, codec, model, config, _flags(cfg),
            extra_params=alphas,
            extra_loss=lambda: slim.pact_regularizer(pact_params))
    slim.finalize_quantization(model, records)
    _finish_training(args, "rec", model, history, alphabet=alphabet,
                     quant_records=records)


def _load_pipeline(args):
    det, _ = _load_model(args.det, "det")
    rec, manifest = _load_model(args.rec, "rec")
    if not manifest["alphabet"]:
        raise ModelError(f"{args.rec} has no alphabet in its manifest")
    codec = LabelCodec(manifest["alphabet"])
    cls = None
    if args.cls and not args.no_cls:
        cls, _ = _load_model(args.cls, "cls")
    return det, cls, rec, codec


def _iter_images(data_dir: str):
    labels = os.path.join(data_dir, "labels.jsonl")
    if os.path.isfile(labels):
        for row in sg.read_jsonl(labels):
            yield row["image"], sg.read_ppm(os.path.join(data_dir,
                                                         row["image"]))
    else:
        names = sorted(n for n in os.listdir(data_dir)
                       if n.endswith(".ppm"))
        if not names:
            raise DataError(f"no .ppm images found in {data_dir!r}")
        for name in names:
            yield name, sg.read_ppm(os.path.join(data_dir, name))


def cmd_infer(args):
    schema = {"bin_thresh": (float, 0.3), "box_thresh": (float, 0.6),
              "unclip_ratio": (float, 1.5)}
    cfg = read_config(args.config, schema)
    det, cls, rec, codec = _load_pipeline(args)
    _require_dir(args.data, "data")
    os.makedirs(args.out, exist_ok=True)
    pred_path = os.path.join(args.out, "predictions.jsonl")
    with open(pred_path, "w") as fh:
        for name, image in _iter_images(args.data):
            result = pipeline_infer(image, det, rec, codec, cls_model=cls,
                                    bin_thresh=cfg["bin_thresh"],
                                    box_thresh=cfg["box_thresh"],
                                    unclip_ratio=cfg["unclip_ratio"])
            fh.write(json.dumps(
                {"image": name,
                 "instances": [line.to_dict() for line in result.lines]},
                sort_keys=True) + "\n")
    print(f"predictions\t{pred_path}")


def _emit_metrics(args, rows):
    os.makedirs(args.out, exist_ok=True)
    paths = rp.metrics_report(rows, args.out)
    for row in rows:
        print(f"{row['name']}\t{row['value']:.4f}")
    for path in paths:
        print(f"report\t{path}")


def cmd_eval_det(args):
    read_config(args.config, {})
    model, _ = _load_model(args.det, "det")
    pages = sg.read_det_dataset(_require_dir(args.data, "data"))
    matched = n_gt = n_pred = 0
    for page in pages:
        preds = tr.detect_page(model, page.image)
        gts = [inst.quad for inst in page.instances]
        report = mx.det_hmean(gts, preds)
        matched += len(report.matches)
        n_gt += len(gts)
        n_pred += len(preds)
    p = matched / n_pred if n_pred else 0.0
    r = matched / n_gt if n_gt else 0.0
    h = 0.0 if p + r == 0 else 2 * p * r / (p + r)
    _emit_metrics(args, [{"name": "precision", "value": p},
                         {"name": "recall", "value": r},
                         {"name": "hmean", "value": h}])


def cmd_eval_rec(args):
    read_config(args.config, {})
    model, manifest = _load_model(args.rec, "rec")
    codec = LabelCodec(manifest["alphabet"])
    samples = sg.read_rec_dataset(_require_dir(args.data, "data"))
    acc = tr.eval_recognizer(model, samples, codec)
    _emit_metrics(args, [{"name": "accuracy", "value": acc}])


def cmd_eval_cls(args):
    read_config(args.config, {})
    model, _ = _load_model(args.cls, "cls")
    samples = sg.read_cls_dataset(_require_dir(args.data, "data"))
    acc = tr.eval_classifier(model, samples)
    _emit_metrics(args, [{"name": "accuracy", "value": acc}])


def cmd_eval_system(args):
    schema = {"iou_thresh": (float, 0.5)}
    cfg = read_config(args.config, schema)
    det, cls, rec, codec = _load_pipeline(args)
    pages = sg.read_det_dataset(_require_dir(args.data, "data"))
    correct = n_gt = n_pred = 0
    for page in pages:
        result = pipeline_infer(page.image, det, rec, codec, cls_model=cls)
        gts = page.instances
        preds = [sg.TextInstance(line.quad, line.text)
                 for line in result.lines]
        matches = mx._greedy_match([g.quad for g in gts],
                                   [p.quad for p in preds],
                                   cfg["iou_thresh"])
        correct += sum(1 for gi, pi, _ in matches
                       if gts[gi].text == preds[pi].text)
        n_gt += len(gts)
        n_pred += len(preds)
    p = correct / n_pred if n_pred else 0.0
    r = correct / n_gt if n_gt else 0.0
    f = 0.0 if p + r == 0 else 2 * p * r / (p + r)
    _emit_metrics(args, [{"name": "precision", "value": p},
                         {"name": "recall", "value": r},
                         {"name": "fscore", "value": f}])


# ---------------------------------------------------------------------------
# argument wiring


def build_parser() -> argparse.ArgumentParser:
    parser = argparse.ArgumentParser(
        prog="pocr", description="Desk-scale OCR pipeline toolkit")
    sub = parser.add_subparsers(dest="command", required=True)

    def add(name, fn, data=False, val=False, init=False, bundles=()):
        p = sub.add_parser(name)
        p.add_argument("--config", action="append", default=[],
                       metavar="FILE|KEY=VALUE")
        p.add_argument("--seed", type=int, default=0)
        p.add_argument("--out", required=True)
        if data:
            p.add_argument("--data")
        if val:
            p.add_argument("--val")
        if init:
            p.add_argument("--init")
        for b in bundles:
            p.add_argument(f"--{b}")
        if "cls" in bundles:
            p.add_argument("--no-cls", action="store_true")
        p.set_defaults(fn=fn)
        return p

    add("synth", cmd_synth)
    add("train-det", cmd_train_det, data=True, val=True, init=True)
    add("train-rec", cmd_train_rec, data=True, val=True, init=True)
    add("train-cls", cmd_train_cls, data=True, val=True, init=True)
    add("prune", cmd_prune, data=True, init=True)
    add("quantize", cmd_quantize, data=True, init=True)
    add("infer", cmd_infer, data=True, bundles=("det", "cls", "rec"))
    add("eval-det", cmd_eval_det, data=True, bundles=("det",))
    add("eval-rec", cmd_eval_rec, data=True, bundles=("rec",))
    add("eval-cls", cmd_eval_cls, data=True, bundles=("cls",))
    add("eval-system", cmd_eval_system, data=True,
        bundles=("det", "cls", "rec"))
    return parser


def main(argv=None) -> int:
    args = build_parser().parse_args(argv)
    try:
        args.fn(args)
    except (ConfigError, DataError, ModelError) as exc:
        print(f"error: {exc}", file=sys.stderr)
        return EXIT_CODES[type(exc)]
    except FileNotFoundError as exc:
        print(f"error: {exc}", file=sys.stderr)
        return 3
    return 0


if __name__ == "__main__":
    sys.exit(main())
