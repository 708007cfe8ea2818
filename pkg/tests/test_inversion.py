import numpy as np
import pytest
from hypothesis import given, settings
from hypothesis import strategies as st

from diffvicl.backends.stub import StubDenoiser
from diffvicl.core import Latent, make_schedule, schedule_for_backend
from diffvicl.errors import IncompatibleScheduleError, MalformedTrajectoryError
from diffvicl.inversion import (
    InversionCache,
    NoiseTrajectory,
    content_seed,
    invert,
    load_trajectory,
    reconstruct,
    save_trajectory,
)


def rand_latent(seed, shape=(4, 8, 8)) -> Latent:
    rng = np.random.default_rng(seed)
    return Latent(rng.standard_normal(shape).astype(np.float32))


class TestRoundTrip:
    def test_single_step(self, tiny_backend):
        z0 = rand_latent(0)
        sched = schedule_for_backend(1, tiny_backend)
        traj = invert(z0, sched, tiny_backend, seed=0)
        rec = reconstruct(traj, tiny_backend)
        assert np.max(np.abs(rec.values - z0.values)) <= 1e-5
        assert rec.timestep_tag == 0

    def test_ten_steps(self, tiny_backend):
        z0 = rand_latent(1)
        sched = schedule_for_backend(10, tiny_backend)
        traj = invert(z0, sched, tiny_backend, seed=3)
        rec = reconstruct(traj, tiny_backend)
        assert np.max(np.abs(rec.values - z0.values)) <= 1e-4

    @given(seed=st.integers(0, 1000), T=st.integers(1, 12))
    @settings(max_examples=15, deadline=None)
    def test_round_trip_property(self, seed, T):
        backend = StubDenoiser(latent_size=8, base_timesteps=40)
        z0 = rand_latent(seed)
        traj = invert(z0, schedule_for_backend(T, backend), backend, seed=seed + 1)
        rec = reconstruct(traj, backend)
        assert np.max(np.abs(rec.values - z0.values)) <= 1e-4

    def test_round_trip_through_attention_sites(self, small_backend):
        z0 = rand_latent(2, shape=(4, 16, 16))
        traj = invert(z0, schedule_for_backend(6, small_backend), small_backend, seed=5)
        rec = reconstruct(traj, small_backend)
        assert np.max(np.abs(rec.values - z0.values)) <= 1e-4


class TestDeterminismAndShape:
    def test_invert_is_pure_given_seed(self, tiny_backend):
        z0 = rand_latent(4)
        sched = schedule_for_backend(5, tiny_backend)
        a = invert(z0, sched, tiny_backend, seed=9)
        b = invert(z0, sched, tiny_backend, seed=9)
        assert np.array_equal(a.terminal.values, b.terminal.values)
        assert np.array_equal(a.step_noises, b.step_noises)

    def test_different_seeds_differ(self, tiny_backend):
        z0 = rand_latent(5)
        sched = schedule_for_backend(5, tiny_backend)
        a = invert(z0, sched, tiny_backend, seed=0)
        b = invert(z0, sched, tiny_backend, seed=1)
        assert not np.array_equal(a.step_noises, b.step_noises)

    def test_two_replays_are_bit_identical(self, tiny_backend):
        traj = invert(rand_latent(6), schedule_for_backend(7, tiny_backend), tiny_backend, seed=2)
        r1 = reconstruct(traj, tiny_backend)
        r2 = reconstruct(traj, tiny_backend)
        assert np.array_equal(r1.values, r2.values)

    def test_shapes_preserved(self, tiny_backend):
        z0 = rand_latent(7)
        traj = invert(z0, schedule_for_backend(4, tiny_backend), tiny_backend, seed=0)
        assert traj.terminal.values.shape == z0.values.shape
        assert traj.step_noises.shape == (4,) + z0.values.shape
        assert traj.terminal.timestep_tag == 4


class TestPerturbation:
    def test_zeroed_step_noise_strictly_hurts(self, tiny_backend):
        z0 = rand_latent(8)
        traj = invert(z0, schedule_for_backend(6, tiny_backend), tiny_backend, seed=1)
        clean_err = np.max(np.abs(reconstruct(traj, tiny_backend).values - z0.values))
        noises = traj.step_noises.copy()
        noises[3] = 0.0
        broken = NoiseTrajectory(terminal=traj.terminal, step_noises=noises, schedule=traj.schedule)
        broken_err = np.max(np.abs(reconstruct(broken, tiny_backend).values - z0.values))
        assert broken_err > clean_err


class TestErrors:
    def test_backend_base_mismatch(self, tiny_backend):
        z0 = rand_latent(9)
        foreign = make_schedule(5, tiny_backend.base_timesteps + 10)
        with pytest.raises(IncompatibleScheduleError):
            invert(z0, foreign, tiny_backend)

    def test_noise_levels_must_agree_with_backend(self, tiny_backend):
        wrong_levels = np.linspace(0.5, 0.1, tiny_backend.base_timesteps)
        sched = make_schedule(5, tiny_backend.base_timesteps, wrong_levels)
        with pytest.raises(IncompatibleScheduleError):
            invert(rand_latent(10), sched, tiny_backend)

    def test_trajectory_length_must_match_schedule(self, tiny_backend):
        traj = invert(rand_latent(11), schedule_for_backend(5, tiny_backend), tiny_backend)
        with pytest.raises(MalformedTrajectoryError):
            NoiseTrajectory(terminal=traj.terminal, step_noises=traj.step_noises[:3], schedule=traj.schedule)

    def test_invert_needs_clean_latent(self, tiny_backend):
        z = Latent(np.zeros((4, 8, 8), np.float32), timestep_tag=2)
        with pytest.raises(MalformedTrajectoryError):
            invert(z, schedule_for_backend(3, tiny_backend), tiny_backend)


class TestSerialization:
    def test_save_load_round_trip(self, tiny_backend, tmp_path):
        traj = invert(rand_latent(12), schedule_for_backend(6, tiny_backend), tiny_backend, seed=4)
        path = tmp_path / "traj.npz"
        save_trajectory(traj, path)
        loaded = load_trajectory(path)
        assert np.array_equal(loaded.terminal.values, traj.terminal.values)
        assert np.array_equal(loaded.step_noises, traj.step_noises)
        assert loaded.schedule == traj.schedule
        # replay of the loaded trajectory matches the original's replay
        assert np.array_equal(
            reconstruct(loaded, tiny_backend).values, reconstruct(traj, tiny_backend).values
        )

    def test_cache_returns_identical_trajectory(self, tiny_backend, tmp_path):
        cache = InversionCache(tmp_path / "cache")
        z0 = rand_latent(13)
        sched = schedule_for_backend(5, tiny_backend)
        first = cache.get_or_invert(z0, sched, tiny_backend, seed=1)
        again = cache.get_or_invert(z0, sched, tiny_backend, seed=1)
        assert np.array_equal(first.step_noises, again.step_noises)
        assert len(list((tmp_path / "cache").glob("*.npz"))) == 1

    def test_cache_distinguishes_seed_and_content(self, tiny_backend, tmp_path):
        cache = InversionCache(tmp_path / "cache")
        sched = schedule_for_backend(5, tiny_backend)
        cache.get_or_invert(rand_latent(14), sched, tiny_backend, seed=1)
        cache.get_or_invert(rand_latent(14), sched, tiny_backend, seed=2)
        cache.get_or_invert(rand_latent(15), sched, tiny_backend, seed=1)
        assert len(list((tmp_path / "cache").glob("*.npz"))) == 3


class TestContentSeed:
    def test_function_of_content_not_position(self):
        a = np.random.default_rng(0).standard_normal((4, 8, 8)).astype(np.float32)
        assert content_seed(3, a) == content_seed(3, a.copy())
        assert content_seed(3, a) != content_seed(4, a)
        b = a.copy()
        b[0, 0, 0] += 1.0
        assert content_seed(3, a) != content_seed(3, b)
