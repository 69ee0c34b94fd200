"""CRNN text recognition: backbone, BiLSTM encoder, CTC loss, greedy decoding.

The recognizer consumes 32-pixel-tall line images, collapses the final
feature map height by average pooling, runs a bidirectional LSTM over the
column sequence, and classifies each timestep over the alphabet plus blank.
"""

from __future__ import annotations

from dataclasses import dataclass

import numpy as np

from . import numcore as nc
from .nnblocks import Backbone, BackboneConfig, Linear, Module, StridePlan
from .numcore import Tensor
from .rectify import resize_bilinear

REC_INPUT_H = 32
REC_INPUT_W = 320
BLANK = 0


class LabelCodec:
    """Maps characters to indices 1..N; index 0 is the CTC blank."""

    def __init__(self, alphabet: str):
        if len(alphabet) == 0:
            raise ValueError("alphabet must be non-empty")
        if len(set(alphabet)) != len(alphabet):
            raise ValueError("alphabet contains duplicate characters")
        self.alphabet = alphabet
        self._to_idx = {ch: i + 1 for i, ch in enumerate(alphabet)}

    @property
    def vocab_size(self) -> int:
        return len(self.alphabet) + 1

    def encode(self, text: str) -> list:
        try:
            return [self._to_idx[ch] for ch in text]
        except KeyError as exc:
            raise ValueError(f"character {exc.args[0]!r} not in alphabet") from exc

    def decode(self, indices) -> str:
        return "".join(self.alphabet[i - 1] for i in indices)


@dataclass
class RecHeadConfig:
    seq_dim: int = 48
    hidden: int = 48
    vocab_size: int = 0


class BiLSTM(Module):
    def __init__(self, in_dim: int, hidden: int, rng=None):
        rng = rng or np.random.default_rng(0)
        self.hidden = hidden

        def init(shape, scale):
            return Tensor(rng.uniform(-scale, scale, shape), requires_grad=True)

        k = 1.0 / np.sqrt(hidden)
        self.wx_f = init((in_dim, 4 * hidden), k)
        self.wh_f = init((hidden, 4 * hidden), k)
        self.b_f = init((4 * hidden,), k)
        self.wx_b = init((in_dim, 4 * hidden), k)
        self.wh_b = init((hidden, 4 * hidden), k)
        self.b_b = init((4 * hidden,), k)

    def forward(self, x: Tensor) -> Tensor:
        """x: [T, N, F] -> [T, N, 2*hidden]."""
        fwd = nc.lstm_sequence(x, self.wx_f, self.wh_f, self.b_f)
        bwd = nc.lstm_sequence(x, self.wx_b, self.wh_b, self.b_b, reverse=True)
        return nc.concat([fwd, bwd], axis=2)


class RecModel(Module):
    """Recognition network; forward yields per-timestep log-probabilities."""

    def __init__(self, head_config: RecHeadConfig,
                 backbone_config: BackboneConfig = None, rng=None):
        rng = rng or np.random.default_rng(0)
        if head_config.vocab_size < 2:
            raise ValueError("vocab_size must cover at least one symbol plus blank")
        if backbone_config is None:
            backbone_config = BackboneConfig(
                width_multiplier=0.5, stride_plan=StridePlan.recognition((1, 1)),
                use_se_globally=True)
        self.head_config = head_config
        self.backbone_config = backbone_config
        self.backbone = Backbone(backbone_config, rng=rng)
        feat_ch = backbone_config.out_channels
        self.encoder = BiLSTM(feat_ch, head_config.hidden, rng=rng)
        self.seq_fc = Linear(2 * head_config.hidden, head_config.seq_dim, rng=rng)
        self.cls_fc = Linear(head_config.seq_dim, head_config.vocab_size, rng=rng)

    def forward(self, x: Tensor, train: bool = False) -> Tensor:
        """x: [N, 3, 32, W] -> log_probs [T, N, vocab_size]."""
        feat = self.backbone.forward(x, train)[-1]  # [N, C, h, T]
        feat = feat.mean(axis=2)  # collapse height: [N, C, T]
        seq = nc.transpose(feat, (2, 0, 1))  # [T, N, C]
        enc = self.encoder.forward(seq)
        t_len, n, d = enc.shape
        flat = nc.reshape(enc, (t_len * n, d))
        flat = self.cls_fc.forward(self.seq_fc.forward(flat))
        logits = nc.reshape(flat, (t_len, n, self.head_config.vocab_size))
        return nc.log_softmax(logits, axis=2)


def prepare_line(image: np.ndarray, pad_to: int = REC_INPUT_W) -> np.ndarray:
    """Aspect-preserving resize to height 32, right-pad, map [0,1] -> [-1,1]."""
    c, h, w = image.shape
    new_w = min(pad_to, max(1, round(w * REC_INPUT_H / h)))
    resized = resize_bilinear(image, REC_INPUT_H, new_w)
    canvas = np.zeros((c, REC_INPUT_H, pad_to))
    canvas[:, :, :new_w] = resized
    return canvas * 2.0 - 1.0


def rec_forward(image: np.ndarray, model: RecModel) -> Tensor:
    """Single line image [3,H,W] (values in [0,1]) -> log_probs [T, vocab]."""
    prepped = prepare_line(image)
    with nc.no_grad():
        out = model.forward(Tensor(prepped[None]))
    return Tensor(out.data[:, 0, :])


# ---------------------------------------------------------------------------
# CTC


def _extend_labels(labels, t_len):
    """Blank-interleaved labels padded to a common length, with validity mask."""
    exts = []
    for lab in labels:
        lab = list(lab)
        if any(i == BLANK for i in lab):
            raise ValueError("label contains the blank index 0")
        dups = sum(1 for a, b in zip(lab, lab[1:]) if a == b)
        if t_len < len(lab) + dups:
            raise ValueError(
                f"label of length {len(lab)} (+{dups} duplicate gaps) "
                f"infeasible for {t_len} timesteps")
        ext = [BLANK]
        for i in lab:
            ext.extend([i, BLANK])
        exts.append(ext)
    smax = max(len(e) for e in exts)
    ext_arr = np.zeros((len(exts), smax), dtype=np.int64)
    s_len = np.array([len(e) for e in exts])
    for i, e in enumerate(exts):
        ext_arr[i, :len(e)] = e
    return ext_arr, s_len


def ctc_loss_batch(log_probs: Tensor, labels, reduction: str = "mean") -> Tensor:
    """CTC negative log-likelihood for a batch.

    log_probs: [T, N, V] per-timestep log-probabilities; labels: list of index
    sequences (no blanks). Forward DP over the blank-interleaved labels in log
    space; the gradient is the standard alpha-beta posterior.
    """
    t_len, n, v = log_probs.shape
    if len(labels) != n:
        raise ValueError(f"{n} sequences but {len(labels)} labels")
    ext, s_len = _extend_labels(labels, t_len)
    smax = ext.shape[1]
    y = log_probs.data
    ninf = -np.inf
    idx_n = np.arange(n)[:, None]

    # allow skip transitions only onto non-blank symbols differing from s-2
    can_skip = np.zeros((n, smax), dtype=bool)
    if smax > 2:
        can_skip[:, 2:] = (ext[:, 2:] != BLANK) & (ext[:, 2:] != ext[:, :-2])
    valid = np.arange(smax)[None, :] < s_len[:, None]

    y_ext = y[:, idx_n, ext]  # [T, N, S]

    alphas = np.full((t_len, n, smax), ninf)
    a = np.full((n, smax), ninf)
    a[:, 0] = y_ext[0][:, 0]
    if smax > 1:
        has2 = s_len > 1
        a[has2, 1] = y_ext[0][has2, 1]
    alphas[0] = a
    with np.errstate(invalid="ignore"):
        for t in range(1, t_len):
            shift1 = np.full_like(a, ninf)
            shift1[:, 1:] = a[:, :-1]
            shift2 = np.full_like(a, ninf)
            shift2[:, 2:] = a[:, :-2]
            shift2[~can_skip] = ninf
            a = np.logaddexp(np.logaddexp(a, shift1), shift2) + y_ext[t]
            a[~valid] = ninf
            alphas[t] = a

    last = alphas[-1][idx_n[:, 0], s_len - 1]
    prev = np.where(s_len >= 2, alphas[-1][idx_n[:, 0], np.maximum(s_len - 2, 0)], ninf)
    log_p = np.logaddexp(last, prev)
    losses = -log_p
    total = losses.mean() if reduction == "mean" else losses.sum()

    def backward(g):
        # beta DP (inclusive of y at t), then posterior-weighted scatter
        betas = np.full((t_len, n, smax), ninf)
        b = np.full((n, smax), ninf)
        b[idx_n[:, 0], s_len - 1] = y_ext[-1][idx_n[:, 0], s_len - 1]
        two = s_len >= 2
        b[idx_n[two, 0], s_len[two] - 2] = y_ext[-1][idx_n[two, 0], s_len[two] - 2]
        betas[-1] = b
        with np.errstate(invalid="ignore"):
            for t in range(t_len - 2, -1, -1):
                shift1 = np.full_like(b, ninf)
                shift1[:, :-1] = b[:, 1:]
                shift2 = np.full_like(b, ninf)
                shift2[:, :-2] = np.where(can_skip[:, 2:], b[:, 2:], ninf)
                b = np.logaddexp(np.logaddexp(b, shift1), shift2) + y_ext[t]
                b[~valid] = ninf
                betas[t] = b
            post = np.exp(alphas + betas - y_ext - log_p[None, :, None])
        post[np.isnan(post)] = 0.0
        grad_y = np.zeros_like(y)
        t_idx = np.arange(t_len)[:, None, None].repeat(n, 1).repeat(smax, 2)
        n_idx = idx_n[None].repeat(t_len, 0).repeat(smax, 2)
        np.add.at(grad_y, (t_idx, n_idx, ext[None].repeat(t_len, 0)), post)
        grad_y = -grad_y
        scale = g / n if reduction == "mean" else g
        return (grad_y * float(scale),)

    return nc._make(np.array(total), (log_probs,), backward)


def ctc_loss(log_probs: Tensor, label) -> Tensor:
    """CTC loss for one sequence: log_probs [T, V], label indices (no blanks)."""
    t_len, v = log_probs.shape
    lp = nc.reshape(log_probs, (t_len, 1, v))
    return ctc_loss_batch(lp, [list(label)], reduction="sum")


def greedy_decode(log_probs, codec: LabelCodec):
    """Best-path decoding: argmax, collapse repeats, drop blanks.

    Returns (text, mean confidence of the kept timesteps).
    """
    y = log_probs.data if isinstance(log_probs, Tensor) else np.asarray(log_probs)
    path = y.argmax(axis=1)
    probs = np.exp(y.max(axis=1))
    chars = []
    confs = []
    prev = BLANK
    for t, idx in enumerate(path):
        if idx != BLANK and idx != prev:
            chars.append(int(idx))
            confs.append(probs[t])
        prev = idx
    text = codec.decode(chars)
    conf = float(np.mean(confs)) if confs else 0.0
    return text, conf
