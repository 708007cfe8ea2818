"""Command-line entry points: predict, invert, retrieve, bench, ablate,
cache-embeddings.

Exit codes are machine-readable failure classes: 0 ok, 2 config, 3 io,
4 backend, 5 numerical divergence. Every command writes only under its
declared output location.
"""

from __future__ import annotations

import argparse
import json
import sys
from pathlib import Path

from . import __version__
from .benchmark.datasets import build_episodes, make_adapter
from .benchmark.runner import format_report_table, run_ablation, run_benchmark
from .core import (
    VICLConfig,
    config_from_sources,
    load_image,
    parse_config_file,
    save_image,
)
from .errors import IngestionError, VICLError
from .inversion import InversionCache, invert, save_trajectory
from .pipeline import PromptEpisode, encode, run_episode, write_trace
from .retrieval import EmbeddingCache, embed, embed_pool, make_encoder, retrieve
from .tasks import TASKS


def make_backend(name: str, image_size: int):
    if name == "stub":
        from .backends.stub import StubDenoiser

        if image_size % 8 != 0 or image_size // 8 < 16:
            raise VICLError(f"stub backend needs an image size >= 128 divisible by 8, got {image_size}")
        return StubDenoiser(latent_size=image_size // 8)
    if name == "sd":
        from .backends.sd import StableDiffusionBackend

        return StableDiffusionBackend(image_size=image_size)
    raise VICLError(f"unknown backend {name!r}; choose 'stub' or 'sd'")


def _add_config_flags(parser: argparse.ArgumentParser):
    parser.add_argument("--config", help="flat key-value config file; flags override its values")
    parser.add_argument("--steps", type=int)
    parser.add_argument("--tau", type=float)
    parser.add_argument("--beta", type=float)
    parser.add_argument("--gamma", type=float)
    parser.add_argument("--resolutions", help="comma-separated subset of 16,32,64")
    parser.add_argument("--ensemble", choices=("iwpe", "fe"))
    parser.add_argument("--n-prompts", type=int, dest="n_prompts")
    parser.add_argument("--seed", type=int)


def _config_from_args(args) -> VICLConfig:
    file_values = parse_config_file(args.config) if args.config else None
    overrides = {
        key: getattr(args, key, None)
        for key in ("steps", "tau", "beta", "gamma", "resolutions", "ensemble", "n_prompts", "seed")
    }
    return config_from_sources(file_values, overrides)


def _add_backend_flags(parser: argparse.ArgumentParser):
    parser.add_argument("--backend", choices=("stub", "sd"), default="sd")
    parser.add_argument("--image-size", type=int, default=512, dest="image_size")


def _require_file(path: str) -> Path:
    p = Path(path)
    if not p.is_file():
        raise IngestionError(p, "file not found")
    return p


def _pool_images_from_dir(pool_dir: Path, size: int) -> dict:
    files = sorted(p for p in pool_dir.iterdir() if p.is_file())
    if not files:
        raise IngestionError(pool_dir, "no images in pool directory")
    return {p.name: load_image(p, size=size) for p in files}


# ---------------------------------------------------------------------------
# commands


def cmd_predict(args) -> int:
    cfg = _config_from_args(args)
    backend = make_backend(args.backend, args.image_size)
    out_dir = Path(args.out_dir)
    query = load_image(_require_file(args.query), size=backend.image_size)

    if args.prompt:
        pairs = []
        for img_path, target_path in args.prompt:
            pairs.append(
                (
                    load_image(_require_file(img_path), size=backend.image_size),
                    load_image(_require_file(target_path), size=backend.image_size),
                )
            )
        prompt_ids = [f"pair-{i + 1}" for i in range(len(pairs))]
    elif args.retrieve_pool:
        pool_dir = Path(args.retrieve_pool)
        if not pool_dir.is_dir():
            raise IngestionError(pool_dir, "prompt pool directory not found")
        targets_dir = Path(args.retrieve_targets) if args.retrieve_targets else pool_dir.parent / "targets"
        if not targets_dir.is_dir():
            raise IngestionError(targets_dir, "prompt target directory not found")
        encoder = make_encoder(args.encoder)
        cache = EmbeddingCache(args.cache, encoder_id=encoder.encoder_id) if args.cache else None
        pool_images = _pool_images_from_dir(pool_dir, backend.image_size)
        records = embed_pool(pool_images, encoder, cache=cache)
        query_record = embed(query, encoder, image_id="__query__")
        prompt_ids = retrieve(query_record, records, cfg.n_prompts)
        pairs = []
        for name in prompt_ids:
            target_matches = sorted(targets_dir.glob(Path(name).stem + ".*"))
            if not target_matches:
                raise IngestionError(targets_dir / Path(name).stem, "no target image for retrieved prompt")
            pairs.append((pool_images[name], load_image(target_matches[0], size=backend.image_size)))
    else:
        raise VICLError("predict needs either --prompt IMAGE TARGET pairs or --retrieve-pool DIR")

    if cfg.n_prompts != len(pairs):
        import dataclasses

        cfg = dataclasses.replace(cfg, n_prompts=len(pairs))
    episode = PromptEpisode(query=query, prompts=tuple(pairs), task=args.task, config=cfg)
    inv_cache = InversionCache(out_dir / "inversions") if args.cache_inversions else None
    prediction, trace = run_episode(episode, backend, inversion_cache=inv_cache)
    save_image(prediction, out_dir / "prediction.png")
    trace.input_hashes["prompt_ids"] = list(prompt_ids)
    write_trace(trace, out_dir / "trace.json")
    print(f"prediction: {out_dir / 'prediction.png'}")
    print(f"trace:      {out_dir / 'trace.json'}")
    return 0


def cmd_invert(args) -> int:
    cfg = _config_from_args(args)
    backend = make_backend(args.backend, args.image_size)
    img = load_image(_require_file(args.image), size=backend.image_size)
    z0 = encode(img, backend)
    from .core import schedule_for_backend

    schedule = schedule_for_backend(cfg.steps, backend)
    traj = invert(z0, schedule, backend, seed=cfg.seed)
    save_trajectory(traj, args.out)
    print(f"trajectory: {args.out} ({traj.num_steps} steps)")
    return 0


def cmd_retrieve(args) -> int:
    encoder = make_encoder(args.encoder)
    pool_dir = Path(args.pool_dir)
    if not pool_dir.is_dir():
        raise IngestionError(pool_dir, "pool directory not found")
    cache = EmbeddingCache(args.cache, encoder_id=encoder.encoder_id) if args.cache else None
    pool_images = _pool_images_from_dir(pool_dir, args.image_size)
    records = embed_pool(pool_images, encoder, cache=cache)
    query = load_image(_require_file(args.query), size=args.image_size)
    ranked = retrieve(embed(query, encoder, image_id="__query__"), records, args.n)
    for name in ranked:
        print(name)
    if args.out:
        Path(args.out).parent.mkdir(parents=True, exist_ok=True)
        Path(args.out).write_text(json.dumps({"query": args.query, "ranked": ranked}, indent=2) + "\n")
    return 0


def cmd_cache_embeddings(args) -> int:
    encoder = make_encoder(args.encoder)
    pool_dir = Path(args.pool_dir)
    if not pool_dir.is_dir():
        raise IngestionError(pool_dir, "pool directory not found")
    cache = EmbeddingCache(args.cache, encoder_id=encoder.encoder_id)
    records = embed_pool(_pool_images_from_dir(pool_dir, args.image_size), encoder, cache=cache)
    print(f"cached {len(records)} embeddings in {args.cache}")
    return 0


def _build_bench_pieces(args):
    cfg = _config_from_args(args)
    backend = make_backend(args.backend, args.image_size)
    adapter = make_adapter(args.dataset, args.root, args.task, args.split, image_size=backend.image_size)
    retrieval = None if args.retrieval == "random" else args.retrieval
    episodes = build_episodes(
        adapter,
        cfg,
        retrieval=retrieval,
        seed=cfg.seed,
        subsample=args.subsample,
        cache_path=args.cache,
    )
    return cfg, backend, adapter, episodes


def cmd_bench(args) -> int:
    _, backend, adapter, episodes = _build_bench_pieces(args)
    out_dir = Path(args.out_dir)
    cache = InversionCache(out_dir / "inversions") if args.cache_inversions else None
    report = run_benchmark(episodes, adapter, backend, out_dir=out_dir, inversion_cache=cache, progress=args.progress)
    print(format_report_table(report))
    return 0


def _parse_grid(items) -> dict:
    grid: dict = {}
    for item in items or []:
        if "=" not in item:
            raise VICLError(f"grid axis must look like name=v1,v2 got {item!r}")
        axis, values = item.split("=", 1)
        axis = axis.strip()
        cells = []
        for raw in values.split(","):
            raw = raw.strip()
            if axis in ("n_prompts", "steps"):
                cells.append(int(raw))
            elif axis in ("tau", "beta", "gamma"):
                cells.append(float(raw))
            elif axis == "resolutions":
                cells.append(tuple(int(r) for r in raw.split("+")))
            elif axis in ("adain", "share_query_step_noise"):
                cells.append(raw.lower() in ("1", "true", "yes", "on"))
            else:
                cells.append(raw)
        grid[axis] = cells
    if not grid:
        raise VICLError("ablate needs at least one --grid axis")
    return grid


def cmd_ablate(args) -> int:
    grid = _parse_grid(args.grid)
    if "n_prompts" in grid:
        # base episodes must carry the widest prompt list any cell trims from
        args.n_prompts = max(max(grid["n_prompts"]), args.n_prompts or 1)
    _, backend, adapter, episodes = _build_bench_pieces(args)
    out_dir = Path(args.out_dir)
    cache = InversionCache(out_dir / "inversions") if args.cache_inversions else None
    rows = run_ablation(
        grid, episodes, adapter, backend, out_dir=out_dir, inversion_cache=cache, progress=args.progress
    )
    for row in rows:
        cell = ", ".join(f"{k}={v}" for k, v in sorted(row["cell"].items()))
        print(f"{cell}: {row['aggregates']}")
    return 0


# ---------------------------------------------------------------------------


def build_parser() -> argparse.ArgumentParser:
    parser = argparse.ArgumentParser(prog="diffvicl", description=__doc__)
    parser.add_argument("--version", action="version", version=f"diffvicl {__version__}")
    sub = parser.add_subparsers(dest="command", required=True)

    p = sub.add_parser("predict", help="run one in-context prediction")
    p.add_argument("--query", required=True)
    p.add_argument("--prompt", nargs=2, action="append", metavar=("IMAGE", "TARGET"))
    p.add_argument("--retrieve-pool", dest="retrieve_pool", help="directory of candidate prompt images")
    p.add_argument("--retrieve-targets", dest="retrieve_targets", help="directory of matching target images")
    p.add_argument("--task", choices=TASKS, default="foreground_segmentation")
    p.add_argument("--encoder", choices=("clip", "downsample"), default="clip")
    p.add_argument("--cache", help="embedding cache file for retrieval")
    p.add_argument("--cache-inversions", action="store_true", dest="cache_inversions")
    p.add_argument("--out-dir", default="out", dest="out_dir")
    _add_backend_flags(p)
    _add_config_flags(p)
    p.set_defaults(func=cmd_predict)

    p = sub.add_parser("invert", help="invert one image to a cached noise trajectory")
    p.add_argument("--image", required=True)
    p.add_argument("--out", required=True)
    _add_backend_flags(p)
    _add_config_flags(p)
    p.set_defaults(func=cmd_invert)

    p = sub.add_parser("retrieve", help="rank prompt candidates for a query image")
    p.add_argument("--query", required=True)
    p.add_argument("--pool-dir", required=True, dest="pool_dir")
    p.add_argument("--n", type=int, default=5)
    p.add_argument("--encoder", choices=("clip", "downsample"), default="clip")
    p.add_argument("--cache")
    p.add_argument("--out")
    p.add_argument("--image-size", type=int, default=512, dest="image_size")
    p.set_defaults(func=cmd_retrieve)

    p = sub.add_parser("cache-embeddings", help="pre-build an embedding cache for a pool")
    p.add_argument("--pool-dir", required=True, dest="pool_dir")
    p.add_argument("--cache", required=True)
    p.add_argument("--encoder", choices=("clip", "downsample"), default="clip")
    p.add_argument("--image-size", type=int, default=512, dest="image_size")
    p.set_defaults(func=cmd_cache_embeddings)

    for name, help_text in (("bench", "run a benchmark"), ("ablate", "run an ablation grid")):
        p = sub.add_parser(name, help=help_text)
        p.add_argument("--dataset", required=True)
        p.add_argument("--root", required=True)
        p.add_argument("--split", default=None)
        p.add_argument("--task", choices=TASKS, default="foreground_segmentation")
        p.add_argument("--retrieval", choices=("random", "clip", "downsample"), default="random")
        p.add_argument("--cache", help="embedding cache file")
        p.add_argument("--cache-inversions", action="store_true", dest="cache_inversions")
        p.add_argument("--subsample", type=int)
        p.add_argument("--out-dir", default="out", dest="out_dir")
        p.add_argument("--progress", action="store_true")
        if name == "ablate":
            p.add_argument("--grid", action="append", metavar="AXIS=V1,V2", help="repeatable grid axis")
        _add_backend_flags(p)
        _add_config_flags(p)
        p.set_defaults(func=cmd_bench if name == "bench" else cmd_ablate)

    return parser


def main(argv=None) -> int:
    parser = build_parser()
    args = parser.parse_args(argv)
    try:
        return args.func(args)
    except VICLError as exc:
        print(f"error ({type(exc).__name__}): {exc}", file=sys.stderr)
        return exc.exit_code
    except FileNotFoundError as exc:
        print(f"error (io): {exc}", file=sys.stderr)
        return 3
    except OSError as exc:
        print(f"error (io): {exc}", file=sys.stderr)
        return 3


if __name__ == "__main__":
    sys.exit(main())
