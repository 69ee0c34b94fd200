import numpy as np
import pytest

from pocr import nnblocks as nb
from pocr import numcore as nc
from pocr.numcore import Tensor


@pytest.fixture
def rng():
    return np.random.default_rng(0)


class TestModuleProtocol:
    def test_state_dict_round_trip(self, rng):
        a = nb.ConvBNAct(3, 8, 3, rng=rng)
        b = nb.ConvBNAct(3, 8, 3, rng=np.random.default_rng(99))
        b.load_state(a.state_dict())
        x = Tensor(rng.standard_normal((2, 3, 6, 6)))
        assert np.array_equal(a.forward(x, train=False).data,
                              b.forward(x, train=False).data)

    def test_named_modules_includes_children(self, rng):
        m = nb.ConvBNAct(3, 4, 3, rng=rng)
        names = [n for n, _ in m.named_modules()]
        assert "" in names and any("conv" in n for n in names)

    def test_param_count_matches_state(self, rng):
        m = nb.ConvBNAct(3, 4, 3, rng=rng)
        assert nb.param_count(m) == sum(p.data.size for p in m.params())

    def test_load_state_rejects_shape_mismatch(self, rng):
        a = nb.Conv2d(3, 4, 3, rng=rng)
        state = {k: np.zeros((1, 1)) for k in a.state_dict()}
        with pytest.raises(ValueError):
            a.load_state(state)


class TestSamePadding:
    @pytest.mark.parametrize("k,s", [(3, 1), (3, 2), (5, 1), (5, 2), (1, 1)])
    def test_floor_division_shapes(self, rng, k, s):
        conv = nb.Conv2d(2, 3, k, stride=(s, s), rng=rng)
        for hw in (7, 8, 9):
            x = Tensor(rng.standard_normal((1, 2, hw, hw)))
            out = conv.forward(x)
            assert out.shape[2] == hw // s
            assert out.shape[3] == hw // s


class TestBatchNorm:
    def test_train_normalizes_batch(self, rng):
        bn = nb.BatchNorm2d(4)
        x = Tensor(rng.standard_normal((8, 4, 5, 5)) * 3 + 2)
        out = bn.forward(x, train=True)
        assert np.allclose(out.data.mean(axis=(0, 2, 3)), 0, atol=1e-9)
        assert np.allclose(out.data.std(axis=(0, 2, 3)), 1, atol=1e-2)

    def test_running_stats_converge_to_batch_stats(self, rng):
        bn = nb.BatchNorm2d(2)
        x = Tensor(rng.standard_normal((16, 2, 4, 4)) * 2 + 1)
        for _ in range(200):
            bn.forward(x, train=True)
        train_out = bn.forward(x, train=True)
        eval_out = bn.forward(x, train=False)
        assert np.allclose(train_out.data, eval_out.data, atol=1e-2)

    def test_eval_does_not_update_stats(self, rng):
        bn = nb.BatchNorm2d(2)
        before = bn.running_mean.copy()
        bn.forward(Tensor(rng.standard_normal((4, 2, 3, 3))), train=False)
        assert np.array_equal(bn.running_mean, before)


class TestSEBlock:
    def test_output_shape_and_gating(self, rng):
        se = nb.SEBlock(8, rng=rng)
        x = Tensor(rng.standard_normal((2, 8, 4, 4)))
        out = se.forward(x)
        assert out.shape == x.shape
        # SE rescales channels: output is x times a per-channel factor
        ratio = out.data / (x.data + 1e-12)
        per_channel = ratio.mean(axis=(2, 3))
        assert np.allclose(ratio, per_channel[:, :, None, None], atol=1e-6)


class TestBackbone:
    def test_detection_pyramid_strides(self, rng):
        cfg = nb.BackboneConfig(0.5, nb.StridePlan.detection())
        net = nb.Backbone(cfg, rng=rng)
        x = Tensor(rng.standard_normal((1, 3, 64, 64)))
        feats = net.forward(x)
        assert [f.shape[2] for f in feats] == [16, 8, 4, 2]

    def test_recognition_keeps_width(self, rng):
        cfg = nb.BackboneConfig(0.35, nb.StridePlan.recognition((1, 1)),
                                use_se_globally=False)
        net = nb.Backbone(cfg, rng=rng)
        x = Tensor(rng.standard_normal((1, 3, 32, 64)))
        feats = net.forward(x)
        sh, sw = cfg.stride_plan.total_stride()
        assert feats[-1].shape[2] == 32 // sh
        assert feats[-1].shape[3] == 64 // sw

    def test_width_multiplier_scales_params(self, rng):
        small = nb.Backbone(nb.BackboneConfig(0.35), rng=rng)
        big = nb.Backbone(nb.BackboneConfig(1.0), rng=rng)
        assert nb.param_count(big) > nb.param_count(small)

    def test_config_round_trip(self):
        cfg = nb.BackboneConfig(0.5, nb.StridePlan.recognition((2, 1)),
                                use_se_globally=False)
        back = nb.BackboneConfig.from_dict(cfg.to_dict())
        assert back.to_dict() == cfg.to_dict()

    def test_scale_channels_multiple_of_four(self):
        for mult in (0.35, 0.5, 1.0):
            for ch in (8, 16, 48, 144):
                scaled = nb.scale_channels(ch, mult)
                assert scaled % 4 == 0 and scaled >= 4

    def test_serialized_bytes_counts_everything(self, rng):
        m = nb.ConvBNAct(3, 4, 3, rng=rng)
        total = nb.serialized_bytes(m, "f64")
        payload = sum(v.size * 8 for v in m.state_dict().values())
        assert total > payload  # manifest overhead included


class TestQuantHooks:
    def test_weight_quant_hook_applied(self, rng):
        conv = nb.Conv2d(2, 3, 1, rng=rng)
        x = Tensor(rng.standard_normal((1, 2, 4, 4)))
        base = conv.forward(x).data
        conv.weight_quant = lambda w: w * 0.0
        assert np.allclose(conv.forward(x).data, 0.0)
        assert not np.allclose(base, 0.0)
