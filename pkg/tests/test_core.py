import numpy as np
import pytest
from hypothesis import given, settings
from hypothesis import strategies as st

from diffvicl.core import (
    ImageRGB,
    Latent,
    PathId,
    VICLConfig,
    config_from_sources,
    grayscale,
    make_schedule,
    parse_config_file,
    preprocess_image,
    preprocess_labels,
    preprocess_points,
    psnr,
    validate_config,
)
from diffvicl.errors import DimensionError, InvalidConfigError


class TestMakeSchedule:
    def test_single_step_sits_at_top(self):
        sched = make_schedule(1, 1000)
        assert sched.timestep_indices == (999,)

    def test_seventy_steps_over_thousand(self):
        sched = make_schedule(70, 1000)
        assert len(sched.timestep_indices) == 70
        assert sched.timestep_indices[0] == 999
        gaps = np.diff(sched.timestep_indices)
        assert np.all(gaps < 0)
        assert set(-gaps) <= {14, 15}  # even spacing of 1000/70

    def test_hand_enumerated_small_case(self):
        assert make_schedule(4, 8).timestep_indices == (7, 5, 3, 1)

    @pytest.mark.parametrize("bad_T", [0, -3, 9])
    def test_out_of_range_steps_rejected(self, bad_T):
        with pytest.raises(InvalidConfigError):
            make_schedule(bad_T, 8)

    @given(T=st.integers(1, 200), base=st.integers(1, 2000))
    @settings(max_examples=60)
    def test_length_and_strict_decrease(self, T, base):
        if T > base:
            with pytest.raises(InvalidConfigError):
                make_schedule(T, base)
            return
        sched = make_schedule(T, base)
        assert len(sched.timestep_indices) == T
        assert all(a > b for a, b in zip(sched.timestep_indices, sched.timestep_indices[1:]))
        assert 0 <= sched.timestep_indices[-1] <= sched.timestep_indices[0] == base - 1
        assert sched == make_schedule(T, base)  # deterministic

    def test_noise_levels_attach(self):
        alphas = np.linspace(0.99, 0.01, 20)
        sched = make_schedule(5, 20, alphas)
        assert sched.has_noise_levels
        assert sched.alpha_bars[0] == alphas[19]
        assert sched.alpha_bars_prev[-1] == alphas[0]
        assert sched.alpha_bars_prev[:-1] == sched.alpha_bars[1:]


class TestValidateConfig:
    def test_defaults_accepted_unchanged(self):
        cfg = VICLConfig()
        assert validate_config(cfg) == cfg
        assert cfg.steps == 70 and cfg.tau == 0.4 and cfg.beta == 1.67 and cfg.gamma == 3.5

    def test_zero_tau_names_field(self):
        with pytest.raises(InvalidConfigError) as err:
            validate_config(VICLConfig(tau=0.0))
        assert err.value.field == "tau"

    def test_single_resolution_ablation_mode_accepted(self):
        cfg = validate_config(VICLConfig(resolutions=(16,)))
        assert cfg.resolutions == (16,)

    def test_empty_resolutions_rejected(self):
        with pytest.raises(InvalidConfigError) as err:
            validate_config(VICLConfig(resolutions=()))
        assert err.value.field == "resolutions"

    def test_bad_steps_rejected(self):
        with pytest.raises(InvalidConfigError) as err:
            validate_config(VICLConfig(steps=0))
        assert err.value.field == "steps"

    def test_resolution_set_normalized(self):
        cfg = validate_config(VICLConfig(resolutions=(64, 16, 64)))
        assert cfg.resolutions == (16, 64)

    @given(
        steps=st.integers(1, 100),
        tau=st.floats(0.01, 10),
        beta=st.floats(0, 5),
        gamma=st.floats(0, 10),
        ensemble=st.sampled_from(["iwpe", "fe"]),
    )
    @settings(max_examples=40)
    def test_idempotent(self, steps, tau, beta, gamma, ensemble):
        cfg = VICLConfig(steps=steps, tau=tau, beta=beta, gamma=gamma, ensemble=ensemble)
        once = validate_config(cfg)
        assert validate_config(once) == once


class TestConfigFile:
    def test_parse_and_merge(self, tmp_path):
        f = tmp_path / "run.cfg"
        f.write_text("# comment\nsteps = 30\ntau=0.5\nresolutions = 16,32\nensemble = fe\n")
        cfg = config_from_sources(parse_config_file(f), {"tau": 0.7, "seed": 9})
        assert cfg.steps == 30
        assert cfg.tau == 0.7  # flag wins over file
        assert cfg.resolutions == (16, 32)
        assert cfg.ensemble == "fe"
        assert cfg.seed == 9

    def test_unknown_key_rejected(self, tmp_path):
        f = tmp_path / "run.cfg"
        f.write_text("halt = yes\n")
        with pytest.raises(InvalidConfigError):
            parse_config_file(f)

    def test_garbled_line_rejected(self, tmp_path):
        f = tmp_path / "run.cfg"
        f.write_text("steps 30\n")
        with pytest.raises(InvalidConfigError):
            parse_config_file(f)


class TestTypes:
    def test_image_range_enforced(self):
        with pytest.raises(ValueError):
            ImageRGB(np.full((4, 4, 3), 2.0, np.float32))
        with pytest.raises(DimensionError):
            ImageRGB(np.zeros((4, 4), np.float32))

    def test_latent_checks(self):
        with pytest.raises(ValueError):
            Latent(np.full((2, 2, 2), np.nan, np.float32))
        z = Latent(np.zeros((4, 8, 8), np.float32), timestep_tag=3)
        assert z.shape == (4, 8, 8) and z.timestep_tag == 3

    def test_path_id_roles(self):
        assert PathId.query().key == "query"
        assert PathId.prompt_image(2).key == "prompt_image_2"
        with pytest.raises(ValueError):
            PathId("query", index=1)
        with pytest.raises(ValueError):
            PathId("prompt_image")


class TestPreprocess:
    def test_resize_then_center_crop_is_square(self):
        tall = ImageRGB(np.random.default_rng(0).random((100, 60, 3)).astype(np.float32))
        out = preprocess_image(tall, size=48)
        assert out.pixels.shape == (48, 48, 3)

    def test_labels_follow_same_geometry(self):
        ids = np.zeros((100, 60), np.int32)
        ids[:, 30:] = 7
        out = preprocess_labels(ids, size=48)
        assert out.shape == (48, 48)
        assert set(np.unique(out)) <= {0, 7}

    def test_points_follow_same_geometry(self):
        # a point at the center of the source lands at the center of the crop
        pts, inside = preprocess_points(np.array([[30.0, 50.0]]), orig_hw=(100, 60), size=48)
        assert inside[0]
        assert pts[0] == pytest.approx([24.0, 24.0], abs=1.0)

    def test_grayscale_replicates_luminance(self):
        img = ImageRGB(np.random.default_rng(1).random((8, 8, 3)).astype(np.float32))
        g = grayscale(img)
        assert np.allclose(g.pixels[:, :, 0], g.pixels[:, :, 1])
        assert np.allclose(g.pixels[:, :, 0], g.pixels[:, :, 2])

    def test_psnr_of_identical_images_is_infinite(self):
        img = ImageRGB(np.zeros((4, 4, 3), np.float32))
        assert psnr(img, img) == float("inf")
