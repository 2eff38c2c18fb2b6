import pytest
import yaml

from lift3d.config import RunConfig, config_from_dict, load_config, save_config


class TestConfigDefaults:
    def test_headline_constants(self):
        cfg = RunConfig()
        assert cfg.field.levels == 16
        assert cfg.field.base_resolution == 16
        assert cfg.field.finest_resolution == 2048
        assert cfg.field.features_per_entry == 2
        assert cfg.camera.radius_range == (0.4, 1.0)
        assert cfg.camera.fov_range == (50.0, 70.0)
        assert cfg.diffusion.beta_start == 0.00085
        assert cfg.diffusion.beta_end == 0.012
        assert cfg.diffusion.guidance_weight == 100.0
        assert (cfg.diffusion.t_lo, cfg.diffusion.t_hi) == (50, 950)
        assert cfg.weights.orient == 10.0
        assert cfg.weights.sparsity == 1e-3
        assert cfg.weights.smoothness == 0.1
        assert cfg.train.total_steps == 10_000
        assert cfg.train.lr == 1e-3
        assert cfg.train.betas == (0.9, 0.99)
        assert cfg.train.shading_start_step == 1000
        assert cfg.renderer.train_resolution == 128
        assert cfg.renderer.samples_per_ray == 128
        assert cfg.renderer.normal_map_resolution == 100
        assert cfg.evaluation.n_views == 100
        assert cfg.evaluation.orbit_radius == 1.25

    def test_module_config_conversions(self):
        cfg = RunConfig()
        field_cfg = cfg.field.to_field_config()
        assert field_cfg.grid.levels == 16
        assert field_cfg.density_scale == 25.0
        sched = cfg.diffusion.to_schedule()
        assert sched.beta(1) == pytest.approx(0.00085)
        weights = cfg.weights.to_loss_weights()
        assert weights.orient == 10.0


class TestStrictLoading:
    def test_unknown_top_level_key_faults(self):
        with pytest.raises(ValueError, match="unknown config key"):
            config_from_dict({"seeed": 3})

    def test_unknown_nested_key_faults(self):
        with pytest.raises(ValueError, match="camera"):
            config_from_dict({"camera": {"radius_rang": [0.4, 1.0]}})

    def test_partial_overrides_keep_defaults(self):
        cfg = config_from_dict({"train": {"total_steps": 50}, "seed": 9})
        assert cfg.train.total_steps == 50
        assert cfg.seed == 9
        assert cfg.train.lr == 1e-3  # untouched default

    def test_lists_become_tuples(self):
        cfg = config_from_dict({"camera": {"radius_range": [0.5, 0.9]}})
        assert cfg.camera.radius_range == (0.5, 0.9)

    def test_invalid_enum_faults(self):
        with pytest.raises(ValueError):
            config_from_dict({"ranking": {"depth_mode": "l2"}})


class TestYamlRoundTrip:
    def test_save_load_round_trip(self, tmp_path):
        cfg = RunConfig()
        cfg.seed = 42
        cfg.train.total_steps = 123
        path = tmp_path / "run.yaml"
        save_config(cfg, path)
        loaded = load_config(path)
        assert loaded == cfg

    def test_yaml_contains_all_sections(self, tmp_path):
        path = tmp_path / "run.yaml"
        save_config(RunConfig(), path)
        data = yaml.safe_load(path.read_text())
        for section in ("field", "renderer", "camera", "diffusion", "weights",
                        "ranking", "train", "adaptation", "prior", "evaluation"):
            assert section in data

    def test_bad_file_reports_path(self, tmp_path):
        path = tmp_path / "broken.yaml"
        path.write_text("train:\n  bogus_key: 1\n")
        with pytest.raises(ValueError, match="broken.yaml"):
            load_config(path)
