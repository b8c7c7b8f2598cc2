import pytest

from decaps.config import (ConfigError, ModelConfig, RunConfig, build_run_config, dump_run_config,
                           load_run_config, parse_pairs, stage_channels)


class TestDefaults:
    def test_full_scale_values(self):
        c = ModelConfig()
        assert (c.input_size, c.primary_heads, c.conv1_heads, c.conv2_heads) == (448, 32, 32, 32)
        assert (c.pose_dim, c.kernel, c.stride, c.routing_iters) == (16, 3, 1, 3)
        assert (c.learning_rate, c.beta1, c.beta2, c.batch_size) == (1e-4, 0.5, 0.999, 16)
        assert (c.theta_c, c.theta_d) == (0.5, 0.3)
        assert c.routing == "idr" and c.routing_stop_gradient and c.coordinate_addition

    def test_desk_preset(self):
        c = ModelConfig.desk()
        assert c.desk_scale and c.input_size == 96 and c.primary_heads == 8
        assert c.conv2_heads == 8 and c.backbone_out_channels == 64

    def test_stage_channels(self):
        assert stage_channels(ModelConfig()) == [64, 256, 512, 1024]
        assert stage_channels(ModelConfig.desk()) == [4, 16, 32, 64]


class TestFileFormat:
    def test_parse(self):
        pairs = parse_pairs("# comment\na = 1\n\nb=two  # trailing\n")
        assert pairs == {"a": "1", "b": "two"}

    @pytest.mark.parametrize("text,msg", [("novalue\n", "key = value"), ("a = 1\na = 2\n", "duplicate")])
    def test_parse_errors(self, text, msg):
        with pytest.raises(ConfigError, match=msg):
            parse_pairs(text)

    def test_unknown_key_rejected(self):
        with pytest.raises(ConfigError, match="unknown config keys: bogus"):
            build_run_config({"bogus": "1"})

    @pytest.mark.parametrize("key,value", [("epochs", "ten"), ("peekaboo", "maybe"), ("theta_c", "x")])
    def test_bad_values(self, key, value):
        with pytest.raises(ConfigError, match=key):
            build_run_config({key: value})

    def test_typed_values_and_desk_overrides(self):
        run = build_run_config({"desk_scale": "true", "input_size": "128", "epochs": "3",
                                "peekaboo": "off", "data_root": "/data"})
        assert run.model.desk_scale and run.model.input_size == 128 and run.model.primary_heads == 8
        assert run.epochs == 3 and run.peekaboo is False and run.data_root == "/data"

    def test_round_trip(self, tmp_path):
        run = build_run_config({"desk_scale": "yes", "seed": "5", "routing": "baseline", "out_dir": "x"})
        path = tmp_path / "run.cfg"
        path.write_text(dump_run_config(run))
        again = load_run_config(path)
        assert again == run

    def test_defaults_round_trip(self, tmp_path):
        path = tmp_path / "d.cfg"
        path.write_text(dump_run_config(RunConfig()))
        assert load_run_config(path) == RunConfig()

    def test_missing_file(self, tmp_path):
        with pytest.raises(ConfigError):
            load_run_config(tmp_path / "nope.cfg")

    def test_architecture_subset(self):
        a, b = ModelConfig.desk(), ModelConfig.desk(learning_rate=1.0, seed=9)
        assert a.architecture() == b.architecture()
        assert a.architecture() != ModelConfig.desk(conv1_heads=4).architecture()
