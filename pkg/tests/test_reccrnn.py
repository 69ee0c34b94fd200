import itertools

import numpy as np
import pytest

from pocr import numcore as nc
from pocr import reccrnn as rc
from pocr.nnblocks import BackboneConfig, StridePlan
from pocr.numcore import Tensor


@pytest.fixture
def rng():
    return np.random.default_rng(0)


class TestLabelCodec:
    def test_round_trip(self):
        codec = rc.LabelCodec("ABC")
        assert codec.decode(codec.encode("CAB")) == "CAB"

    def test_blank_is_index_zero(self):
        codec = rc.LabelCodec("AB")
        assert rc.BLANK == 0
        assert codec.encode("AB") == [1, 2]
        assert codec.vocab_size == 3

    def test_unknown_symbol(self):
        with pytest.raises(ValueError):
            rc.LabelCodec("AB").encode("X")

    def test_duplicate_alphabet_rejected(self):
        with pytest.raises(ValueError):
            rc.LabelCodec("AA")


def brute_force_ctc(log_probs: np.ndarray, label, blank: int) -> float:
    """Negative log of the total probability over ALL T-length alignments
    that collapse to the label (repeat-collapse then blank-removal)."""
    t_len, vocab = log_probs.shape
    total = -np.inf
    for path in itertools.product(range(vocab), repeat=t_len):
        collapsed = [k for k, _ in itertools.groupby(path) if k != blank]
        if collapsed == list(label):
            total = np.logaddexp(total, sum(log_probs[t, path[t]]
                                            for t in range(t_len)))
    return -total


class TestCTCLoss:
    def test_matches_brute_force_exhaustive(self, rng):
        for t_len in (1, 2, 3, 4):
            for lab_len in (0, 1, 2):
                vocab = 3
                logits = rng.standard_normal((t_len, vocab))
                logp = logits - np.log(np.exp(logits).sum(-1, keepdims=True))
                label = list(rng.integers(1, vocab, lab_len))
                dups = sum(1 for a, b in zip(label, label[1:]) if a == b)
                if lab_len + dups > t_len:
                    continue  # no feasible alignment exists
                expected = brute_force_ctc(logp, label, rc.BLANK)
                got = rc.ctc_loss(Tensor(logp), label)
                assert float(got.data) == pytest.approx(expected, abs=1e-9)

    def test_label_longer_than_time_is_infeasible(self, rng):
        logp = np.log(np.full((1, 3), 1 / 3))
        with pytest.raises(ValueError):
            rc.ctc_loss(Tensor(logp), [1, 2])

    def test_batch_mean_matches_singles(self, rng):
        logits = rng.standard_normal((4, 2, 3))
        logp = nc.log_softmax(Tensor(logits), axis=2)
        labels = [[1], [2, 1]]
        batch = rc.ctc_loss_batch(logp, labels)
        singles = [float(rc.ctc_loss(Tensor(logp.data[:, b]),
                                     labels[b]).data) for b in range(2)]
        assert float(batch.data) == pytest.approx(np.mean(singles))

    def test_gradient_flows(self, rng):
        logits = Tensor(rng.standard_normal((3, 1, 4)), requires_grad=True)
        logp = nc.log_softmax(logits, axis=2)
        loss = rc.ctc_loss_batch(logp, [[1, 2]])
        loss.backward()
        assert np.abs(logits.grad).sum() > 0


class TestGreedyDecode:
    def test_collapse_and_blank_removal(self):
        codec = rc.LabelCodec("AB")
        # frames: A A blank B B -> "AB"
        logp = np.full((5, 3), -10.0)
        for t, k in enumerate([1, 1, 0, 2, 2]):
            logp[t, k] = 0.0
        text, conf = rc.greedy_decode(Tensor(logp), codec)
        assert text == "AB"
        assert 0.0 < conf <= 1.0

    def test_all_blank_empty(self):
        codec = rc.LabelCodec("AB")
        logp = np.full((4, 3), -10.0)
        logp[:, 0] = 0.0
        text, _ = rc.greedy_decode(Tensor(logp), codec)
        assert text == ""

    def test_repeat_with_blank_between_kept(self):
        codec = rc.LabelCodec("A")
        logp = np.full((3, 2), -10.0)
        for t, k in enumerate([1, 0, 1]):  # A blank A -> "AA"
            logp[t, k] = 0.0
        text, _ = rc.greedy_decode(Tensor(logp), codec)
        assert text == "AA"


class TestRecModel:
    def test_forward_shape(self, rng):
        codec = rc.LabelCodec("0123")
        cfg = BackboneConfig(0.35, StridePlan.recognition((1, 1)),
                             use_se_globally=False)
        model = rc.RecModel(rc.RecHeadConfig(seq_dim=16, hidden=8,
                                             vocab_size=codec.vocab_size),
                            cfg, rng=rng)
        x = Tensor(rng.standard_normal((2, 3, 32, 64)))
        out = model.forward(x)
        sh, sw = cfg.stride_plan.total_stride()
        assert out.shape == (64 // sw, 2, codec.vocab_size)
        # log-probabilities: each frame sums to 1 in probability space
        assert np.allclose(np.exp(out.data).sum(-1), 1.0, atol=1e-9)

    def test_prepare_line_pads_right(self, rng):
        image = rng.random((3, 16, 20))
        out = rc.prepare_line(image, pad_to=80)
        assert out.shape == (3, rc.REC_INPUT_H, 80)
        assert np.allclose(out[:, :, 45:], -1.0)  # padding area

    def test_rec_forward_single_image(self, rng):
        codec = rc.LabelCodec("01")
        cfg = BackboneConfig(0.35, StridePlan.recognition((1, 1)),
                             use_se_globally=False)
        model = rc.RecModel(rc.RecHeadConfig(16, 8, codec.vocab_size),
                            cfg, rng=rng)
        image = rng.random((3, 14, 40))
        out = rc.rec_forward(image, model)
        assert out.data.ndim == 2
        assert out.shape[1] == codec.vocab_size
