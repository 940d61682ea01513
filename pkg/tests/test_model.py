"""Model assembly, config plumbing, and weight-file persistence tests."""

import numpy as np
import pytest

from sbtrack import engine as eg
from sbtrack import model as md
from sbtrack import weights as wio


@pytest.fixture
def rng():
    return np.random.default_rng(42)


def tiny_inputs(rng, cfg=None):
    cfg = cfg or md.tiny_config()
    z = rng.random((3, cfg.template_size, cfg.template_size), dtype=np.float32)
    x = rng.random((3, cfg.search_size, cfg.search_size), dtype=np.float32)
    return z, x


class TestPresets:
    def test_base_cross_attention_positions(self):
        cfg = md.base_config()
        assert cfg.stages[2].ca_positions == (2, 4, 6, 8, 10)
        assert cfg.stages[0].ca_positions == ()

    def test_published_scales(self):
        light = md.light_config()
        assert [st.channels for st in light.stages] == [32, 64, 160]
        assert [st.depth for st in light.stages] == [2, 2, 6]
        assert [st.stride for st in light.stages] == [4, 2, 1]
        assert light.total_stride == 8
        large = md.large_config()
        assert large.stages[2].depth == 18
        assert large.stages[2].ca_positions == (6, 8, 10, 12, 14, 16, 18)

    def test_head_depth_default_two(self, rng):
        m = md.build_model(md.tiny_config(), seed=0)
        assert len(m.cls_head.blocks) == 2
        assert len(m.reg_head.blocks) == 2

    def test_search_grid(self):
        assert md.base_config().search_grid() == (32, 32)
        assert md.tiny_config().search_grid() == (16, 16)


class TestConfigValidation:
    def test_ca_position_out_of_range(self):
        st = md.StageConfig(kernel=3, channels=8, stride=1, depth=2, heads=1,
                            reduction=1, ca_positions=(3,))
        with pytest.raises(md.ConfigError):
            md.ModelConfig(name="bad", stages=(st,), template_size=8, search_size=16).validate()

    def test_reduction_must_divide_grids(self):
        st = md.StageConfig(kernel=3, channels=8, stride=1, depth=1, heads=1, reduction=3)
        with pytest.raises(md.ConfigError):
            md.ModelConfig(name="bad", stages=(st,), template_size=8, search_size=16).validate()

    def test_classifier_rejects_cross_attention(self):
        st = md.StageConfig(kernel=3, channels=8, stride=1, depth=2, heads=1,
                            reduction=1, ca_positions=(1,))
        cfg = md.ModelConfig(name="bad", stages=(st,) * 4, template_size=16,
                             search_size=16, num_classes=4)
        with pytest.raises(md.ConfigError):
            cfg.validate()

    def test_dim_heads_mismatch(self):
        st = md.StageConfig(kernel=3, channels=9, stride=1, depth=1, heads=2, reduction=1)
        with pytest.raises(ValueError):
            md.ModelConfig(name="bad", stages=(st,), template_size=8, search_size=16).validate()


class TestBuild:
    def test_deterministic_given_seed(self):
        a = md.build_model(md.tiny_config(), seed=5)
        b = md.build_model(md.tiny_config(), seed=5)
        for (na, ta), (nb, tb) in zip(a.named_parameters().items(), b.named_parameters().items()):
            assert na == nb
            np.testing.assert_array_equal(ta.data, tb.data)

    def test_seed_changes_weights(self):
        a = md.build_model(md.tiny_config(), seed=5)
        b = md.build_model(md.tiny_config(), seed=6)
        assert np.abs(a.stages[0].patch.weight.data - b.stages[0].patch.weight.data).max() > 0

    def test_init_statistics(self):
        m = md.build_model(md.tiny_config(), seed=0)
        w = m.stages[2].blocks[0].q_weight.data
        assert np.abs(w).max() <= 0.04 + 1e-6  # 2 sigma * 0.02
        assert abs(w.std() - 0.02) < 0.005
        np.testing.assert_array_equal(m.stages[0].patch.bias.data, 0)
        np.testing.assert_array_equal(m.stages[0].blocks[0].norm1_gamma.data, 1)

    def test_count_monotone_in_depth_and_width(self):
        base = md.parameter_count(md.build_model(md.tiny_config(), seed=0))
        deeper_stages = tuple(
            md.StageConfig(st.kernel, st.channels, st.stride, st.depth + 1, st.heads,
                           st.reduction, st.ca_positions)
            for st in md.tiny_config().stages
        )
        deeper = md.ModelConfig(name="deeper", stages=deeper_stages, template_size=64, search_size=128)
        wider_stages = tuple(
            md.StageConfig(st.kernel, st.channels * 2, st.stride, st.depth, st.heads,
                           st.reduction, st.ca_positions)
            for st in md.tiny_config().stages
        )
        wider = md.ModelConfig(name="wider", stages=wider_stages, template_size=64, search_size=128)
        assert md.parameter_count(md.build_model(deeper, seed=0)) > base
        assert md.parameter_count(md.build_model(wider, seed=0)) > base

    def test_no_cross_attention_helper(self):
        cfg = md.without_cross_attention(md.tiny_config())
        assert all(st.ca_positions == () for st in cfg.stages)

    def test_with_reduction_helper(self):
        cfg = md.with_reduction(md.tiny_config(), 1)
        assert all(st.reduction == 1 for st in cfg.stages)
        m = md.build_model(cfg, seed=0)
        assert m.stages[0].blocks[0].reduce_weight is None


class TestForward:
    def test_output_shapes_and_ranges(self, rng):
        m = md.build_model(md.tiny_config(), seed=0)
        z, x = tiny_inputs(rng)
        cls, reg = md.forward(m, z, x)
        assert cls.shape == (1, 16, 16)
        assert reg.shape == (4, 16, 16)
        assert (cls.data > 0).all() and (cls.data < 1).all()
        assert (reg.data > 0).all() and (reg.data < 1).all()

    def test_deterministic(self, rng):
        m = md.build_model(md.tiny_config(), seed=0)
        z, x = tiny_inputs(rng)
        a = md.forward(m, z, x)
        b = md.forward(m, z, x)
        np.testing.assert_array_equal(a[0].data, b[0].data)
        np.testing.assert_array_equal(a[1].data, b[1].data)

    def test_wrong_input_size_rejected(self, rng):
        m = md.build_model(md.tiny_config(), seed=0)
        with pytest.raises(eg.ShapeError):
            md.forward(m, rng.random((3, 32, 32), dtype=np.float32),
                       rng.random((3, 128, 128), dtype=np.float32))

    def test_siamese_search_output_ignores_template(self, rng):
        cfg = md.without_cross_attention(md.tiny_config())
        m = md.build_model(cfg, seed=0)
        z1, x = tiny_inputs(rng, cfg)
        z2 = rng.random((3, 64, 64), dtype=np.float32)
        cls1, reg1 = md.forward(m, z1, x)
        cls2, reg2 = md.forward(m, z2, x)
        np.testing.assert_array_equal(cls1.data, cls2.data)
        np.testing.assert_array_equal(reg1.data, reg2.data)

    def test_first_cross_property_via_trace(self, rng):
        """Perturbing the template leaves search features bit-identical up to
        the earliest correlation block and changes them afterwards."""
        cfg = md.tiny_config()  # stage 3 correlates at blocks 2 and 4
        m = md.build_model(cfg, seed=0)
        z1, x = tiny_inputs(rng, cfg)
        z2 = rng.random((3, 64, 64), dtype=np.float32)
        tr1: dict = {}
        tr2: dict = {}
        md.forward(m, z1, x, trace=tr1)
        md.forward(m, z2, x, trace=tr2)
        np.testing.assert_array_equal(tr1[("block", 1, 1, "x")], tr2[("block", 1, 1, "x")])
        np.testing.assert_array_equal(tr1[("block", 2, 1, "x")], tr2[("block", 2, 1, "x")])
        np.testing.assert_array_equal(tr1[("block", 3, 1, "x")], tr2[("block", 3, 1, "x")])
        assert np.abs(tr1[("block", 3, 2, "x")] - tr2[("block", 3, 2, "x")]).max() > 0
        assert np.abs(tr1[("block", 3, 4, "x")] - tr2[("block", 3, 4, "x")]).max() > 0

    def test_resume_backbone_is_bit_exact(self, rng):
        from sbtrack import blocks as bl

        m = md.build_model(md.tiny_config(), seed=0)
        z, x = tiny_inputs(rng)
        trace: dict = {}
        fz, fx = md.run_backbone(m, z, x, trace=trace)
        rz = bl.FeatureMap(eg.tensor(trace[("block", 3, 2, "z")]))
        rx = bl.FeatureMap(eg.tensor(trace[("block", 3, 2, "x")]))
        fz2, fx2 = md.resume_backbone(m, rz, rx, stage=3, block=2)
        np.testing.assert_array_equal(fz.tensor.data, fz2.tensor.data)
        np.testing.assert_array_equal(fx.tensor.data, fx2.tensor.data)

    def test_dwcorr_head_variant_runs(self, rng):
        cfg = md.without_cross_attention(md.tiny_config(head_input="dwcorr"))
        m = md.build_model(cfg, seed=0)
        z, x = tiny_inputs(rng, cfg)
        cls, reg = md.forward(m, z, x)
        assert cls.shape == (1, 16, 16) and reg.shape == (4, 16, 16)


class TestClassification:
    def test_logit_length_and_determinism(self, rng):
        cfg = md.classifier_config("tiny", num_classes=7, image_size=64)
        m = md.build_model(cfg, seed=0)
        img = rng.random((3, 64, 64), dtype=np.float32)
        out1 = md.forward_classification(m, img)
        out2 = md.forward_classification(m, img)
        assert out1.shape == (7,)
        np.testing.assert_array_equal(out1.data, out2.data)

    def test_rejects_tracking_model(self, rng):
        m = md.build_model(md.tiny_config(), seed=0)
        with pytest.raises(md.ConfigError):
            md.forward_classification(m, rng.random((3, 64, 64), dtype=np.float32))


class TestConfigSerialization:
    def test_yaml_roundtrip(self):
        cfg = md.tiny_config(pad_mode="circular", head_input="dwcorr")
        text = md.config_to_text(cfg)
        back = md.config_from_text(text)
        assert back == cfg

    def test_file_roundtrip(self, tmp_path):
        cfg = md.light_config()
        md.save_config(cfg, tmp_path / "light.yaml")
        assert md.load_config(tmp_path / "light.yaml") == cfg

    def test_malformed_rejected(self):
        with pytest.raises(md.ConfigError):
            md.config_from_text("stages: nope")


class TestWeightFiles:
    def test_roundtrip_forward_bit_identical(self, rng, tmp_path):
        m = md.build_model(md.tiny_config(), seed=3)
        z, x = tiny_inputs(rng)
        cls0, reg0 = md.forward(m, z, x)
        path = tmp_path / "m.sbtw"
        wio.save_weights(m, path)
        m2 = wio.load_weights(path)
        cls1, reg1 = md.forward(m2, z, x)
        np.testing.assert_array_equal(cls0.data, cls1.data)
        np.testing.assert_array_equal(reg0.data, reg1.data)

    def test_corrupted_magic(self, tmp_path):
        m = md.build_model(md.tiny_config(), seed=0)
        path = tmp_path / "m.sbtw"
        wio.save_weights(m, path)
        raw = bytearray(path.read_bytes())
        raw[:4] = b"XXXX"
        path.write_bytes(bytes(raw))
        with pytest.raises(wio.FormatError):
            wio.read_weight_file(path)

    def test_truncated_file(self, tmp_path):
        m = md.build_model(md.tiny_config(), seed=0)
        path = tmp_path / "m.sbtw"
        wio.save_weights(m, path)
        raw = path.read_bytes()
        path.write_bytes(raw[: len(raw) // 2])
        with pytest.raises(wio.FormatError):
            wio.read_weight_file(path)

    def test_partial_load_four_stage_into_three(self, tmp_path):
        cls_cfg = md.classifier_config("tiny", num_classes=5, image_size=64)
        cls_model = md.build_model(cls_cfg, seed=9)
        path = tmp_path / "pretrain.sbtw"
        wio.save_weights(cls_model, path)

        tracker = md.build_model(md.tiny_config(), seed=0)
        report = wio.load_weights_into(tracker, path)

        assert all(n.startswith(("stage1.", "stage2.", "stage3.")) for n in report.loaded)
        assert report.loaded  # shared stages actually transferred
        assert {n.split(".")[0] for n in report.skipped} == {"stage4", "classifier"}
        assert all(n.startswith("head.") for n in report.missing)
        np.testing.assert_array_equal(tracker.stages[0].patch.weight.data,
                                      cls_model.stages[0].patch.weight.data)
        assert not report.complete
        assert "skipped" in report.summary()

    def test_shape_mismatch_raises(self, tmp_path):
        m = md.build_model(md.tiny_config(), seed=0)
        path = tmp_path / "m.sbtw"
        wio.save_weights(m, path)
        wider = md.ModelConfig(
            name="wider",
            stages=tuple(
                md.StageConfig(st.kernel, st.channels * 2, st.stride, st.depth, st.heads,
                               st.reduction, st.ca_positions)
                for st in md.tiny_config().stages
            ),
            template_size=64, search_size=128)
        with pytest.raises(wio.LoadError):
            wio.load_weights_into(md.build_model(wider, seed=0), path)
