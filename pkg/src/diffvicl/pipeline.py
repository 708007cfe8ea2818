"""End-to-end orchestration of one in-context prediction episode.

The query, every prompt image, and every prompt target are inverted to the
backend's noise space and then denoised in parallel with unmodified
attention, each replaying its own trajectory. The prediction path starts
from the query's terminal noise and is advanced with a blend of two noise
predictions per step: one from its own default self-attention, one from the
recomputed attention that reads the query's queries against the prompt
images' keys and prompt targets' values. Per-step statistics alignment pulls
the prediction's latent moments toward the prompt-target space.
"""

from __future__ import annotations

import hashlib
import json
import time
from dataclasses import dataclass
from pathlib import Path
from typing import Callable, Protocol, Sequence, runtime_checkable

import numpy as np

from . import attention as attn
from .attention import AttentionSite, select_sites
from .core import (
    DenoiseSchedule,
    ImageRGB,
    Latent,
    PathId,
    VICLConfig,
    config_to_dict,
    schedule_for_backend,
    validate_config,
)
from .errors import BackendError, InvalidConfigError, NumericalDivergenceError
from .guidance import NoisePrediction, adain, blend_factor, swap_guide
from .inversion import NoiseTrajectory, content_seed, invert, step_mean_and_scale


@runtime_checkable
class DenoiserBackend(Protocol):
    """What the pipeline needs from a denoising model.

    Backends are conditioned on nothing but the latent (for text-conditional
    models that means a fixed empty-text embedding), are deterministic given
    their construction seed, and expose their decoder self-attention sites
    for interception.
    """

    base_timesteps: int
    latent_channels: int
    latent_size: int
    image_size: int
    alphas_cumprod: np.ndarray

    def attention_sites(self) -> tuple[AttentionSite, ...]: ...

    def predict_noise(self, latent: np.ndarray, timestep: int, interceptor=None) -> np.ndarray: ...

    def encode(self, image: np.ndarray) -> np.ndarray: ...

    def decode(self, latent: np.ndarray) -> np.ndarray: ...


AttentionInterceptor = Callable[[AttentionSite, np.ndarray, np.ndarray, np.ndarray], "np.ndarray | None"]


@dataclass(frozen=True, eq=False)
class PromptEpisode:
    """One query plus its prompt image/target pairs and the run config."""

    query: ImageRGB
    prompts: tuple
    task: str
    config: VICLConfig

    def __post_init__(self):
        prompts = tuple((img, tgt) for img, tgt in self.prompts)
        if len(prompts) < 1:
            raise InvalidConfigError("n_prompts", "an episode needs at least one prompt pair")
        hw = (self.query.height, self.query.width)
        for i, (img, tgt) in enumerate(prompts, start=1):
            for name, im in (("image", img), ("target", tgt)):
                if (im.height, im.width) != hw:
                    raise InvalidConfigError(
                        "prompts", f"prompt {i} {name} is {im.height}x{im.width}, query is {hw[0]}x{hw[1]}"
                    )
        object.__setattr__(self, "prompts", prompts)

    @property
    def n_prompts(self) -> int:
        return len(self.prompts)


@dataclass
class StepRecord:
    """Per-step diagnostics: blend weight and default-vs-combined gap."""

    k: int
    timestep_index: int
    blend: float
    eta_gap: float


@dataclass
class EpisodeTrace:
    """Everything needed to audit or replay one episode."""

    config: VICLConfig
    seed: int
    input_hashes: dict
    trajectories: dict
    final_latents: dict
    prediction: ImageRGB | None
    timings: dict
    step_records: list
    snapshots: dict | None = None


@dataclass
class EpisodeState:
    """Per-path latents mid-episode; ``k`` is the next step to execute."""

    schedule: DenoiseSchedule
    k: int
    latents: dict
    step_noises: dict


class AlphaCapture:
    """Optional diagnostic hook collecting recomputed attention maps.

    ``sites``/``steps`` filter what is kept (None keeps everything at the
    active sites). Maps land in ``records`` keyed by "site-key/step" and can
    be written to a container file with :meth:`save`.
    """

    def __init__(self, sites: Sequence[AttentionSite] | None = None, steps: Sequence[int] | None = None):
        self.sites = set(sites) if sites is not None else None
        self.steps = set(steps) if steps is not None else None
        self.records: dict[str, np.ndarray] = {}

    def wants(self, site: AttentionSite, k: int) -> bool:
        if self.sites is not None and site not in self.sites:
            return False
        if self.steps is not None and k not in self.steps:
            return False
        return True

    def store(self, site: AttentionSite, k: int, alpha: np.ndarray) -> None:
        self.records[f"{site.key}/{k}"] = np.asarray(alpha)

    def save(self, path) -> None:
        Path(path).parent.mkdir(parents=True, exist_ok=True)
        np.savez_compressed(Path(path), **{k.replace("/", "__"): v for k, v in self.records.items()})


class _Capture:
    """Interceptor that records Q/K/V at chosen sites and never overrides."""

    def __init__(self, sites):
        self._wanted = set(sites)
        self.tensors: dict[AttentionSite, tuple] = {}

    def __call__(self, site, q, k, v):
        if site in self._wanted:
            self.tensors[site] = (q, k, v)
        return None


def _vicl_interceptor(
    cfg: VICLConfig,
    sites: Sequence[AttentionSite],
    query_cap: _Capture,
    image_caps: Sequence[_Capture],
    target_caps: Sequence[_Capture],
    k: int,
    alpha_capture: AlphaCapture | None,
) -> AttentionInterceptor:
    active = set(sites)

    def intercept(site, q, k_own, v_own):
        if site not in active:
            return None
        q_c = query_cap.tensors[site][0] if cfg.q_source == "query" else q
        key_caps = image_caps if cfg.k_source == "prompt_image" else target_caps
        k_list = [c.tensors[site][1] for c in key_caps]
        v_list = [c.tensors[site][2] for c in target_caps]
        want_map = alpha_capture is not None and alpha_capture.wants(site, k)
        if cfg.ensemble == "iwpe":
            out = attn.vicl_update(q_c, k_list, v_list, cfg.tau, cfg.beta, return_map=want_map)
            update, amap = out if want_map else (out, None)
        else:
            per_prompt = []
            maps = []
            for k_i, v_i in zip(k_list, v_list):
                out = attn.vicl_update(q_c, [k_i], [v_i], cfg.tau, cfg.beta, return_map=want_map)
                if want_map:
                    per_prompt.append(out[0])
                    maps.append(out[1])
                else:
                    per_prompt.append(out)
            update = attn.feature_ensemble(per_prompt)
            amap = np.stack(maps, axis=0) if want_map else None
        if want_map:
            alpha_capture.store(site, k, amap)
        return update

    return intercept


def _prompt_target_mean(state: EpisodeState, tag: int) -> Latent:
    targets = [v for p, v in state.latents.items() if p.role == PathId.PROMPT_TARGET]
    return Latent(np.mean(np.stack(targets, axis=0), axis=0, dtype=np.float32), timestep_tag=tag)


def _apply_adain(state: EpisodeState, cfg: VICLConfig, tag: int) -> None:
    pred = PathId.prediction()
    target = _prompt_target_mean(state, tag)
    aligned = adain(Latent(state.latents[pred], timestep_tag=tag), target, on_degenerate="identity")
    state.latents[pred] = aligned.values


def run_step(
    state: EpisodeState,
    backend: DenoiserBackend,
    config: VICLConfig,
    sites: Sequence[AttentionSite] | None = None,
    alpha_capture: AlphaCapture | None = None,
    records: list | None = None,
) -> EpisodeState:
    """Advance every path one denoising step.

    The prompt and query paths move under their own trajectories with
    unmodified attention; the prediction path moves under the swap-guided
    blend of its default and recomputed noise predictions plus its assigned
    step noise.
    """
    cfg = config
    sched = state.schedule
    k = state.k
    if not (0 <= k < sched.num_steps):
        raise InvalidConfigError("steps", f"step index {k} outside [0, {sched.num_steps})")
    if sites is None:
        sites = select_sites(backend.attention_sites(), cfg.resolutions)
    t_index = sched.timestep_indices[k]
    t_position = sched.num_steps - k  # paper-style step counter, T down to 1
    pred = PathId.prediction()
    query = PathId.query()
    n = sum(1 for p in state.latents if p.role == PathId.PROMPT_IMAGE)

    if cfg.adain and cfg.adain_position == "pre":
        _apply_adain(state, cfg, tag=t_position)

    def forward(path: PathId, interceptor=None) -> np.ndarray:
        out = backend.predict_noise(state.latents[path], t_index, interceptor)
        if not np.all(np.isfinite(out)):
            raise NumericalDivergenceError(step=k, path=path.key)
        return out

    # forwards for the prompt/query paths, capturing Q/K/V at the active sites
    caps: dict[PathId, _Capture] = {}
    etas: dict[PathId, np.ndarray] = {}
    for path in state.latents:
        if path == pred:
            continue
        cap = _Capture(sites)
        etas[path] = forward(path, cap)
        caps[path] = cap

    eta_default = NoisePrediction(forward(pred), source="default", timestep=t_index)
    if cfg.vicl_attention:
        image_caps = [caps[PathId.prompt_image(i)] for i in range(1, n + 1)]
        target_caps = [caps[PathId.prompt_target(i)] for i in range(1, n + 1)]
        interceptor = _vicl_interceptor(cfg, sites, caps[query], image_caps, target_caps, k, alpha_capture)
        eta_modified = NoisePrediction(forward(pred, interceptor), source="modified", timestep=t_index)
        eta = swap_guide(eta_default, eta_modified, t_position, sched.num_steps, cfg.gamma)
    else:
        eta = eta_default
    if records is not None:
        records.append(
            StepRecord(
                k=k,
                timestep_index=int(t_index),
                blend=blend_factor(t_position, sched.num_steps, cfg.gamma),
                eta_gap=float(np.max(np.abs(eta.eta - eta_default.eta))) if eta is not eta_default else 0.0,
            )
        )

    new_latents = {}
    ab, ab_prev = sched.alpha_bars[k], sched.alpha_bars_prev[k]
    for path, z in state.latents.items():
        step_eta = eta.eta if path == pred else etas[path]
        mu, sigma = step_mean_and_scale(z, step_eta, ab, ab_prev)
        new_latents[path] = mu + sigma * state.step_noises[path][k]
    for path, z in new_latents.items():
        if not np.all(np.isfinite(z)):
            raise NumericalDivergenceError(step=k, path=path.key)

    next_state = EpisodeState(schedule=sched, k=k + 1, latents=new_latents, step_noises=state.step_noises)
    if cfg.adain and cfg.adain_position == "post":
        _apply_adain(next_state, cfg, tag=t_position - 1)
    return next_state


def encode(img: ImageRGB, backend: DenoiserBackend) -> Latent:
    """Encode an image into the backend's latent space."""
    if (img.height, img.width) != (backend.image_size, backend.image_size):
        raise BackendError(
            f"image is {img.height}x{img.width}, backend expects {backend.image_size}x{backend.image_size}"
        )
    return Latent(backend.encode(img.pixels), timestep_tag=0)


def decode(z: Latent, backend: DenoiserBackend) -> ImageRGB:
    """Decode a latent back to image space (the backend round trip is lossy)."""
    return ImageRGB(np.clip(backend.decode(z.values), 0.0, 1.0))


def _image_hash(img: ImageRGB) -> str:
    return hashlib.sha256(np.ascontiguousarray(img.pixels).tobytes()).hexdigest()[:16]


def run_episode(
    ep: PromptEpisode,
    backend: DenoiserBackend,
    inversion_cache=None,
    record_snapshots: bool = False,
    alpha_capture: AlphaCapture | None = None,
) -> tuple[ImageRGB, EpisodeTrace]:
    """Run one full episode and return the prediction with its trace."""
    cfg = validate_config(ep.config)
    if cfg.n_prompts != ep.n_prompts:
        raise InvalidConfigError(
            "n_prompts", f"config says {cfg.n_prompts} prompts, episode has {ep.n_prompts}"
        )
    timings: dict[str, float] = {}

    t0 = time.perf_counter()
    z_query = encode(ep.query, backend)
    z_images = [encode(img, backend) for img, _ in ep.prompts]
    z_targets = [encode(tgt, backend) for _, tgt in ep.prompts]
    timings["encode"] = time.perf_counter() - t0

    t0 = time.perf_counter()
    schedule = schedule_for_backend(cfg.steps, backend)
    memo: dict[bytes, NoiseTrajectory] = {}

    def invert_latent(z0: Latent) -> NoiseTrajectory:
        key = z0.values.tobytes()
        if key not in memo:
            seed = content_seed(cfg.seed, z0.values)
            if inversion_cache is not None:
                memo[key] = inversion_cache.get_or_invert(z0, schedule, backend, seed)
            else:
                memo[key] = invert(z0, schedule, backend, seed=seed)
        return memo[key]

    trajectories: dict[PathId, NoiseTrajectory] = {PathId.query(): invert_latent(z_query)}
    for i, (zi, zt) in enumerate(zip(z_images, z_targets), start=1):
        trajectories[PathId.prompt_image(i)] = invert_latent(zi)
        trajectories[PathId.prompt_target(i)] = invert_latent(zt)
    timings["invert"] = time.perf_counter() - t0

    t0 = time.perf_counter()
    query_traj = trajectories[PathId.query()]
    latents = {p: traj.terminal.values.copy() for p, traj in trajectories.items()}
    step_noises = {p: traj.step_noises for p, traj in trajectories.items()}
    pred = PathId.prediction()
    latents[pred] = query_traj.terminal.values.copy()
    if cfg.share_query_step_noise:
        step_noises[pred] = query_traj.step_noises
    else:
        rng = np.random.default_rng(content_seed(cfg.seed + 1, z_query.values))
        step_noises[pred] = rng.standard_normal(size=query_traj.step_noises.shape).astype(np.float32)

    sites = select_sites(backend.attention_sites(), cfg.resolutions)
    state = EpisodeState(schedule=schedule, k=0, latents=latents, step_noises=step_noises)
    records: list[StepRecord] = []
    snapshots: dict[str, list] | None = {p.key: [] for p in latents} if record_snapshots else None
    for _ in range(schedule.num_steps):
        state = run_step(state, backend, cfg, sites=sites, alpha_capture=alpha_capture, records=records)
        if snapshots is not None:
            for p, z in state.latents.items():
                snapshots[p.key].append(z.copy())
    timings["denoise"] = time.perf_counter() - t0

    t0 = time.perf_counter()
    prediction = decode(Latent(state.latents[pred], timestep_tag=0), backend)
    timings["decode"] = time.perf_counter() - t0

    input_hashes = {"query": _image_hash(ep.query)}
    for i, (img, tgt) in enumerate(ep.prompts, start=1):
        input_hashes[f"prompt_image_{i}"] = _image_hash(img)
        input_hashes[f"prompt_target_{i}"] = _image_hash(tgt)
    trace = EpisodeTrace(
        config=cfg,
        seed=cfg.seed,
        input_hashes=input_hashes,
        trajectories={p.key: traj for p, traj in trajectories.items()},
        final_latents={p.key: z for p, z in state.latents.items()},
        prediction=prediction,
        timings=timings,
        step_records=records,
        snapshots=snapshots,
    )
    return prediction, trace


def write_trace(trace: EpisodeTrace, path) -> None:
    """Write the structured episode report (config echo, seed, timings)."""
    path = Path(path)
    path.parent.mkdir(parents=True, exist_ok=True)
    payload = {
        "config": config_to_dict(trace.config),
        "seed": trace.seed,
        "input_hashes": trace.input_hashes,
        "timings_seconds": {k: round(v, 4) for k, v in trace.timings.items()},
        "steps": [
            {
                "k": r.k,
                "timestep_index": r.timestep_index,
                "blend": r.blend,
                "eta_gap": r.eta_gap,
            }
            for r in trace.step_records
        ],
    }
    path.write_text(json.dumps(payload, indent=2, sort_keys=True) + "\n")
