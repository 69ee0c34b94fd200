"""Training drivers for the three pipeline stages.

Each driver owns its sampling, augmentation, loss, and periodic validation,
and returns the trained model plus a history of logged metrics.  All
randomness flows from the TrainConfig seed, so runs are reproducible.
"""

from __future__ import annotations

from dataclasses import dataclass

import numpy as np

from . import metrics as mx
from . import numcore as nc
from . import synthgen as sg
from . import trainkit as tk
from .detdb import db_loss, db_postprocess, render_targets
from .numcore import Tensor
from .rectify import CLS_INPUT_HW, prepare_patch
from .reccrnn import (REC_INPUT_H, REC_INPUT_W, LabelCodec, ctc_loss_batch,
                      greedy_decode, resize_bilinear)

# fiducial-warp augmentation strength (fraction of line height) and the
# probability of applying it to any given training sample
TIA_AMP = 0.05
TIA_P = 0.5


@dataclass
class StrategyFlags:
    """Which training enhancements are switched on."""

    use_bda: bool = True
    use_tia: bool = False
    use_randaug: bool = False
    use_erasing: bool = False
    use_cosine: bool = True
    use_warmup: bool = True
    use_l2: bool = True


def _lr(step: int, config: tk.TrainConfig, flags: StrategyFlags) -> float:
    if not flags.use_cosine:
        return config.lr0
    warmup = config.warmup_steps if flags.use_warmup else 0
    cfg = tk.TrainConfig(config.lr0, warmup, config.total_steps,
                         config.batch_size, config.l2_decay, config.seed,
                         config.aug_recipe)
    return tk.lr_at(step, cfg)


def _adam(model, config: tk.TrainConfig, flags: StrategyFlags,
          extra_params=()):
    params = model.params() + list(extra_params)
    decay = config.l2_decay if flags.use_l2 else 0.0
    return params, tk.Adam(params, l2_decay=decay)


# ---------------------------------------------------------------------------
# recognizer
# ---------------------------------------------------------------------------


def make_rec_lines(n: int, seed: int, alphabet: str, min_len: int = 1,
                   max_len: int = 8, distort: bool = False,
                   plain: bool = False) -> list:
    """In-memory (image, text) line samples; distortion for validation sets
    that should measure robustness rather than clean-render recall."""
    out = []
    for i in range(n):
        rng = np.random.default_rng(np.random.SeedSequence([seed, i]))
        image, text = sg.make_rec_sample(rng, alphabet, min_len, max_len,
                                         plain=plain)
        if distort:
            image = tk.bda(image, rng)
            image = tk.tia(image, grid_n=4, amplitude=0.06 * image.shape[1],
                           rng=rng)
        out.append((image, text))
    return out


def _prep_line(image: np.ndarray, pad_to: int) -> np.ndarray:
    c, h, w = image.shape
    new_w = min(pad_to, max(1, round(w * REC_INPUT_H / h)))
    resized = resize_bilinear(image, REC_INPUT_H, new_w)
    canvas = np.zeros((c, REC_INPUT_H, pad_to))
    canvas[:, :, :new_w] = resized
    return canvas * 2.0 - 1.0


def _width_buckets(samples, granularity: int = 32):
    """Group sample indices by prepared width so batches pad minimally."""
    buckets = {}
    for i, (image, _) in enumerate(samples):
        _, h, w = image.shape
        pw = min(REC_INPUT_W, max(1, round(w * REC_INPUT_H / h)))
        key = min(REC_INPUT_W,
                  int(np.ceil(max(pw, 8) / granularity)) * granularity)
        buckets.setdefault(key, []).append(i)
    return buckets


def train_recognizer(samples, codec: LabelCodec, model,
                     config: tk.TrainConfig, flags: StrategyFlags = None,
                     val_samples=None, eval_every: int = 0,
                     log=None, extra_params=(), extra_loss=None) -> list:
    """CTC training over (image, text) samples; returns the history list.

    extra_params joins the optimizer (e.g. learnable clip thresholds during
    quantization-aware fine-tuning) and extra_loss() is added to each step's
    loss when given.
    """
    flags = flags or StrategyFlags()
    rng = np.random.default_rng(np.random.SeedSequence([config.seed, 0xCC]))
    params, opt = _adam(model, config, flags, extra_params)
    buckets = _width_buckets(samples)
    keys = sorted(buckets)
    weights = np.array([len(buckets[k]) for k in keys], dtype=np.float64)
    weights /= weights.sum()
    history = []
    for step in range(config.total_steps):
        key = keys[int(rng.choice(len(keys), p=weights))]
        pool = buckets[key]
        idx = rng.choice(len(pool), size=min(config.batch_size, len(pool)),
                         replace=len(pool) < config.batch_size)
        batch, labels = [], []
        for i in idx:
            image, text = samples[pool[int(i)]]
            if flags.use_bda:
                image = tk.bda(image, rng)
            if flags.use_tia and rng.random() < TIA_P:
                image = tk.tia(image, grid_n=4,
                               amplitude=TIA_AMP * image.shape[1], rng=rng)
            batch.append(_prep_line(image, key))
            labels.append(codec.encode(text))
        out = model.forward(Tensor(np.stack(batch)), train=True)
        loss = ctc_loss_batch(out, labels)
        if extra_loss is not None:
            loss = loss + extra_loss()
        model.zero_grad()
        for p in extra_params:
            p.grad = np.zeros_like(p.data)
        loss.backward()
        opt.step(_lr(step, config, flags))
        row = {"step": step, "loss": float(loss.data)}
        if eval_every and (step + 1) % eval_every == 0 and val_samples:
            row["val_accuracy"] = eval_recognizer(model, val_samples,
                                                  codec)
        history.append(row)
        if log is not None:
            log(row)
    return history


def eval_recognizer(model, samples, codec: LabelCodec) -> float:
    pairs = []
    for image, text in samples:
        prepped = _prep_line(image, _round_width(image))
        with nc.no_grad():
            out = model.forward(Tensor(prepped[None]))
        pred, _ = greedy_decode(Tensor(out.data[:, 0, :]), codec)
        pairs.append((text, pred))
    return mx.rec_accuracy(pairs)


def _round_width(image: np.ndarray) -> int:
    _, h, w = image.shape
    pw = min(REC_INPUT_W, max(1, round(w * REC_INPUT_H / h)))
    return min(REC_INPUT_W, int(np.ceil(max(pw, 8) / 8)) * 8)


# ---------------------------------------------------------------------------
# classifier
# ---------------------------------------------------------------------------


def make_cls_lines(n: int, seed: int, alphabet: str) -> list:
    out = []
    for i in range(n):
        rng = np.random.default_rng(np.random.SeedSequence([seed, i]))
        out.append(sg.make_cls_sample(rng, alphabet))
    return out


def _ce_loss(logits: Tensor, labels: np.ndarray) -> Tensor:
    logp = nc.log_softmax(logits, axis=1)
    picked = nc.getitem(logp, (np.arange(len(labels)), labels))
    return nc.tmean(picked) * -1.0


def train_classifier(samples, model, config: tk.TrainConfig,
                     flags: StrategyFlags = None, val_samples=None,
                     eval_every: int = 0, log=None) -> list:
    """Binary direction training over (image, label in {0, 180}) samples."""
    flags = flags or StrategyFlags()
    rng = np.random.default_rng(np.random.SeedSequence([config.seed, 0xC1]))
    params, opt = _adam(model, config, flags)
    history = []
    for step in range(config.total_steps):
        idx = rng.choice(len(samples), size=config.batch_size,
                         replace=len(samples) < config.batch_size)
        batch, labels = [], []
        for i in idx:
            image, label = samples[int(i)]
            if flags.use_bda:
                image = tk.bda(image, rng)
            if flags.use_randaug:
                image = tk.rand_augment(image, rng)
            if flags.use_erasing:
                image = tk.random_erasing(image, rng)
            batch.append(prepare_patch(image, *CLS_INPUT_HW))
            labels.append(0 if label == 0 else 1)
        logits = model.forward(Tensor(np.stack(batch)), train=True)
        loss = _ce_loss(logits, np.asarray(labels))
        model.zero_grad()
        loss.backward()
        opt.step(_lr(step, config, flags))
        row = {"step": step, "loss": float(loss.data)}
        if eval_every and (step + 1) % eval_every == 0 and val_samples:
            row["val_accuracy"] = eval_classifier(model, val_samples)
        history.append(row)
        if log is not None:
            log(row)
    return history


def eval_classifier(model, samples) -> float:
    pairs = []
    for image, label in samples:
        prepped = prepare_patch(image, *CLS_INPUT_HW)
        with nc.no_grad():
            logits = model.forward(Tensor(prepped[None]))
        pred = 0 if logits.data[0, 0] >= logits.data[0, 1] else 180
        pairs.append((label, pred))
    return mx.cls_accuracy(pairs)


# ---------------------------------------------------------------------------
# detector
# ---------------------------------------------------------------------------


def make_det_pages(n: int, seed: int, alphabet: str,
                   lines_per_page: int = 5) -> list:
    out = []
    for i in range(n):
        rng = np.random.default_rng(np.random.SeedSequence([seed, i]))
        out.append(sg.render_page(lines_per_page, rng, alphabet=alphabet))
    return out


def _page_targets(page: sg.PageSample):
    _, h, w = page.image.shape
    quads = [inst.quad.points for inst in page.instances]
    return render_targets(quads, h, w)


def train_detector(pages, model, config: tk.TrainConfig,
                   flags: StrategyFlags = None, crop: int = 128,
                   val_pages=None, eval_every: int = 0, log=None) -> list:
    """DB training on random page crops; targets are rendered once per page
    and cropped together with the image."""
    flags = flags or StrategyFlags()
    rng = np.random.default_rng(np.random.SeedSequence([config.seed, 0xDE]))
    params, opt = _adam(model, config, flags)
    cache = [None] * len(pages)
    history = []
    for step in range(config.total_steps):
        idx = rng.choice(len(pages), size=config.batch_size,
                         replace=len(pages) < config.batch_size)
        imgs, gts, gtt, gtm = [], [], [], []
        for i in idx:
            page = pages[int(i)]
            if cache[int(i)] is None:
                cache[int(i)] = _page_targets(page)
            shrunk, thresh, mask = cache[int(i)]
            _, h, w = page.image.shape
            top = int(rng.integers(0, h - crop + 1))
            left = int(rng.integers(0, w - crop + 1))
            image = page.image[:, top:top + crop, left:left + crop]
            if flags.use_bda:
                # photometric only: the target maps are not warped with
                # the image, so geometric distortion would misalign them
                image = tk.bda(image, rng, geometric=False)
            imgs.append(image)
            gts.append(shrunk[top:top + crop, left:left + crop])
            gtt.append(thresh[top:top + crop, left:left + crop])
            gtm.append(mask[top:top + crop, left:left + crop])
        maps = model.forward(Tensor(np.stack(imgs)), train=True)
        loss = db_loss(maps, np.stack(gts)[:, None], np.stack(gtt)[:, None],
                       np.stack(gtm)[:, None])
        model.zero_grad()
        loss.backward()
        opt.step(_lr(step, config, flags))
        row = {"step": step, "loss": float(loss.data)}
        if eval_every and (step + 1) % eval_every == 0 and val_pages:
            row["val_hmean"] = eval_detector(model, val_pages)
        history.append(row)
        if log is not None:
            log(row)
    return history


def detect_page(model, image: np.ndarray, bin_thresh: float = 0.3,
                box_thresh: float = 0.6, unclip_ratio: float = 1.5) -> list:
    with nc.no_grad():
        maps = model.forward(Tensor(image[None]))
    return db_postprocess(maps.prob.data[0, 0], bin_thresh, box_thresh,
                          unclip_ratio)


def eval_detector(model, pages, iou_thresh: float = 0.5) -> float:
    """Dataset-level HMean: matches and counts pooled across pages."""
    matched = n_gt = n_pred = 0
    for page in pages:
        preds = detect_page(model, page.image)
        gts = [inst.quad for inst in page.instances]
        report = mx.det_hmean(gts, preds, iou_thresh) if gts or preds \
            else mx.MatchReport(0, 0, 0)
        matched += len(report.matches)
        n_gt += len(gts)
        n_pred += len(preds)
    p = matched / n_pred if n_pred else 0.0
    r = matched / n_gt if n_gt else 0.0
    return 0.0 if p + r == 0 else 2 * p * r / (p + r)
