"""Command-line entry points.

Every run validates its configuration and inputs before touching the
filesystem, writes its artifacts into a temporary directory, records a
manifest (config snapshot, seeds, sha256 of every artifact), and then
atomically renames the directory into place.  Exit codes: 0 success,
2 configuration/input error, 3 numeric abort during training.
"""

from __future__ import annotations

import argparse
import hashlib
import json
import os
import sys
import tempfile
from concurrent.futures import ProcessPoolExecutor
from importlib import resources
from pathlib import Path

import numpy as np

from . import analysis, pipeline
from .agents import verify_maxent_identity
from .diffusion import (
    cosine_schedule,
    init_score_model,
    load_score_model,
    save_score_model,
    train_score_model,
)
from .envs import ScriptedPolicy, generate_dataset, load_dataset, make_env_spec, save_dataset
from .errors import ConfigError, FormatError, NumericError
from .seeding import stream


def _default_out_root() -> Path:
    return Path(os.environ.get("O2OLAB_OUT", "runs"))


def _resolve_out(args, command: str) -> Path:
    if args.out:
        return Path(args.out)
    return _default_out_root() / command


def _sha256(path: Path) -> str:
    digest = hashlib.sha256()
    with open(path, "rb") as fh:
        for chunk in iter(lambda: fh.read(1 << 20), b""):
            digest.update(chunk)
    return digest.hexdigest()


def _finalize(tmp: Path, out: Path, command: str, config_dict, seeds):
    artifacts = {}
    for path in sorted(tmp.rglob("*")):
        if path.is_file():
            artifacts[str(path.relative_to(tmp))] = _sha256(path)
    manifest = {
        "command": command,
        "config": config_dict,
        "seeds": list(seeds),
        "artifacts": artifacts,
    }
    with open(tmp / "manifest.json", "w", encoding="utf-8") as fh:
        json.dump(manifest, fh, sort_keys=True, indent=2)
        fh.write("\n")
    os.replace(tmp, out)


class _OutputDir:
    """Atomic output directory: write into a sibling temp dir, rename last."""

    def __init__(self, out: Path):
        self.out = out
        if out.exists():
            raise ConfigError(f"output directory {out} already exists")
        out.parent.mkdir(parents=True, exist_ok=True)
        self.tmp = Path(tempfile.mkdtemp(prefix=f".{out.name}-", dir=out.parent))

    def finalize(self, command, config_dict, seeds):
        _finalize(self.tmp, self.out, command, config_dict, seeds)


def _load_config(args) -> pipeline.ExperimentConfig:
    if not args.config:
        raise ConfigError("--config is required for this command")
    return pipeline.load_config(args.config, args.override)


def _seeds(args, config) -> list[int]:
    if args.seed is not None:
        return [args.seed]
    return [int(s) for s in config.seeds]


def _run_id(env: str, offline: str, online: str, seed: int) -> str:
    return f"{env}:{offline}:{online}:s{seed}"


def parse_run_id(run_id: str):
    env, offline, online, seed = run_id.split(":")
    return env, offline, online, int(seed[1:])


# ----------------------------------------------------------------------
# Command implementations
# ----------------------------------------------------------------------


def _cmd_gen_data(args) -> int:
    config = _load_config(args)
    env = make_env_spec(config.env)
    seeds = _seeds(args, config)
    outdir = _OutputDir(_resolve_out(args, "gen-data"))
    behavior = ScriptedPolicy(env, noise_std=config.data.behavior_noise, gain=config.data.behavior_gain)
    for seed in seeds:
        dataset = generate_dataset(env, behavior, config.data.n_trajectories, seed)
        save_dataset(dataset, outdir.tmp / f"dataset-s{seed}.jsonl")
    outdir.finalize("gen-data", pipeline.config_to_dict(config), seeds)
    print(f"wrote {len(seeds)} dataset(s) to {outdir.out}")
    return 0


def _cmd_train_diffusion(args) -> int:
    config = _load_config(args)
    dataset = load_dataset(args.data)
    seeds = _seeds(args, config)
    outdir = _OutputDir(_resolve_out(args, "train-diffusion"))
    dc = config.diffusion
    for seed in seeds:
        schedule = cosine_schedule(dc.n_steps)
        model = init_score_model(
            dataset.env.state_dim,
            dataset.env.action_dim,
            schedule,
            stream(seed, "init-diffusion"),
            hidden=dc.hidden,
            k_embed_dim=dc.k_embed_dim,
            activation=dc.activation,
            action_low=dataset.env.action_low,
            action_high=dataset.env.action_high,
        )
        outcome = None if config.rvs_enabled else np.ones(dataset.size)
        model, losses = train_score_model(
            model, dataset, dc.steps, dc.batch, dc.lr, seed, outcome_labels=outcome
        )
        seed_dir = outdir.tmp / f"seed-{seed}"
        seed_dir.mkdir()
        save_score_model(model, seed_dir / "score_model.bin")
        run_id = _run_id(dataset.env.name, "diffusion", "none", seed)
        rows = [
            (run_id, "offline", i + 1, "diffusion_loss", float(v))
            for i, v in enumerate(losses)
            if (i + 1) % max(1, dc.steps // 200) == 0 or i + 1 == dc.steps
        ]
        pipeline.write_metrics_csv(rows, seed_dir / "metrics.csv")
    outdir.finalize("train-diffusion", pipeline.config_to_dict(config), seeds)
    print(f"trained {len(seeds)} score model(s) into {outdir.out}")
    return 0


def _pretrain_one(config, dataset, score_model, seed, seed_dir: Path):
    run_id = _run_id(dataset.env.name, config.offline_alg, "offline", seed)
    agent, rows = pipeline.offline_pretrain(
        config, dataset, score_model, seed=seed, run_id=run_id
    )
    seed_dir.mkdir(parents=True, exist_ok=True)
    pipeline.save_checkpoint(agent, seed_dir / "checkpoint.bin")
    pipeline.write_metrics_csv(rows, seed_dir / "metrics.csv")
    return seed


def _cmd_pretrain(args) -> int:
    config = _load_config(args)
    dataset = load_dataset(args.data)
    if dataset.env.name != config.env:
        raise ConfigError(f"dataset env {dataset.env.name!r} != config env {config.env!r}")
    score_model = None
    if config.offline_alg == "smac":
        if not args.diffusion:
            raise ConfigError("pretrain with the score-matched agent needs --diffusion")
        score_model = load_score_model(args.diffusion)
    seeds = _seeds(args, config)
    outdir = _OutputDir(_resolve_out(args, "pretrain"))
    if args.jobs > 1 and len(seeds) > 1:
        with ProcessPoolExecutor(max_workers=args.jobs) as pool:
            list(
                pool.map(
                    _pretrain_one,
                    [config] * len(seeds),
                    [dataset] * len(seeds),
                    [score_model] * len(seeds),
                    seeds,
                    [outdir.tmp / f"seed-{s}" for s in seeds],
                )
            )
    else:
        for seed in seeds:
            _pretrain_one(config, dataset, score_model, seed, outdir.tmp / f"seed-{seed}")
    outdir.finalize("pretrain", pipeline.config_to_dict(config), seeds)
    print(f"pre-trained {len(seeds)} agent(s) into {outdir.out}")
    return 0


def _checkpoint_for_seed(root: Path, seed: int) -> Path:
    if root.is_file():
        return root
    candidate = root / f"seed-{seed}" / "checkpoint.bin"
    if candidate.exists():
        return candidate
    raise ConfigError(f"no checkpoint for seed {seed} under {root}")


def _finetune_one(config, dataset, ckpt_path, seed, seed_dir: Path):
    agent = pipeline.load_checkpoint(ckpt_path)
    env = make_env_spec(agent.env_name)
    run_id = _run_id(env.name, agent.offline_alg, config.online_alg, seed)
    agent, rows = pipeline.online_finetune(
        agent, config, dataset, env, seed=seed, run_id=run_id
    )
    seed_dir.mkdir(parents=True, exist_ok=True)
    pipeline.save_checkpoint(agent, seed_dir / "final_checkpoint.bin")
    pipeline.write_metrics_csv(rows, seed_dir / "metrics.csv")
    return seed


def _cmd_finetune(args) -> int:
    config = _load_config(args)
    dataset = load_dataset(args.data)
    seeds = _seeds(args, config)
    ckpt_root = Path(args.checkpoint)
    ckpt_paths = [_checkpoint_for_seed(ckpt_root, s) for s in seeds]
    outdir = _OutputDir(_resolve_out(args, "finetune"))
    if args.jobs > 1 and len(seeds) > 1:
        with ProcessPoolExecutor(max_workers=args.jobs) as pool:
            list(
                pool.map(
                    _finetune_one,
                    [config] * len(seeds),
                    [dataset] * len(seeds),
                    ckpt_paths,
                    seeds,
                    [outdir.tmp / f"seed-{s}" for s in seeds],
                )
            )
    else:
        for seed, ckpt in zip(seeds, ckpt_paths):
            _finetune_one(config, dataset, ckpt, seed, outdir.tmp / f"seed-{seed}")
    outdir.finalize("finetune", pipeline.config_to_dict(config), seeds)
    print(f"fine-tuned {len(seeds)} agent(s) into {outdir.out}")
    return 0


def _cmd_landscape_line(args) -> int:
    config = _load_config(args)
    a = pipeline.load_checkpoint(args.checkpoint_a)
    b = pipeline.load_checkpoint(args.checkpoint_b)
    env = make_env_spec(a.env_name)
    seeds = _seeds(args, config)
    ts = np.linspace(args.t_lo, args.t_hi, args.points)
    outdir = _OutputDir(_resolve_out(args, "landscape-line"))
    results = analysis.interpolate_eval(
        a.policy, a.policy.params, b.policy.params, ts, env, config.eval_episodes, seeds[0]
    )
    lines = ["t,mean_return,stderr"]
    for t, mean, err in results:
        lines.append(f"{format(t, '.17g')},{format(mean, '.17g')},{format(err, '.17g')}")
    (outdir.tmp / "line.csv").write_text("\n".join(lines) + "\n", encoding="utf-8")
    outdir.finalize("landscape-line", pipeline.config_to_dict(config), seeds)
    print(f"wrote interpolation curve to {outdir.out}")
    return 0


def _cmd_landscape_plane(args) -> int:
    config = _load_config(args)
    a = pipeline.load_checkpoint(args.checkpoint_a)
    b = pipeline.load_checkpoint(args.checkpoint_b)
    c = pipeline.load_checkpoint(args.checkpoint_c)
    env = make_env_spec(a.env_name)
    seeds = _seeds(args, config)
    basis = analysis.plane_basis(a.policy.params, b.policy.params, c.policy.params)
    returns, l_coords, t_coords = analysis.plane_grid_eval(
        a.policy,
        basis,
        env,
        config.eval_episodes,
        seeds[0],
        grid_lo=args.grid_lo,
        grid_hi=args.grid_hi,
        resolution=args.resolution,
    )
    outdir = _OutputDir(_resolve_out(args, "landscape-plane"))
    lines = ["t,l,mean_return"]
    for ti, t in enumerate(t_coords):
        for li, l in enumerate(l_coords):
            lines.append(
                f"{format(t, '.17g')},{format(l, '.17g')},{format(returns[ti, li], '.17g')}"
            )
    (outdir.tmp / "plane.csv").write_text("\n".join(lines) + "\n", encoding="utf-8")
    outdir.finalize("landscape-plane", pipeline.config_to_dict(config), seeds)
    print(f"wrote plane grid to {outdir.out}")
    return 0


def bundled_fixture_records():
    with resources.as_file(
        resources.files("o2olab").joinpath("data/regret_fixture.csv")
    ) as path:
        return analysis.read_regret_records(path)


def _records_from_runs(root: Path):
    """Collect regret records from finetune run directories.

    Scans for metrics.csv files, groups online eval streams by
    (env, offline, online), takes the best reward observed in each
    environment as its reference, and averages regret over seeds.
    """
    streams = {}
    for metrics_path in sorted(root.rglob("metrics.csv")):
        for run_id, phase, step, metric, value in pipeline.read_metrics_csv(metrics_path):
            if phase != "online" or metric != "eval_return":
                continue
            env, offline, online, seed = parse_run_id(run_id)
            if online in ("offline", "none"):
                continue
            streams.setdefault((env, offline, online), {}).setdefault(seed, []).append(
                (step, value)
            )
    if not streams:
        raise ConfigError(f"no online eval streams found under {root}")
    r_star = {}
    for (env, _, _), by_seed in streams.items():
        best = max(v for evals in by_seed.values() for _, v in evals)
        r_star[env] = max(r_star.get(env, -np.inf), best)
    records = []
    for (env, offline, online), by_seed in sorted(streams.items()):
        per_seed = [
            np.array([v for _, v in sorted(evals)]) for _, evals in sorted(by_seed.items())
        ]
        mean, err, _ = analysis.regret_from_evals(per_seed, r_star[env])
        records.append(analysis.RegretRecord(env, offline, online, mean, err))
    return records


def _cmd_regret_table(args) -> int:
    if args.fixture:
        records = bundled_fixture_records()
    else:
        if not args.input:
            raise ConfigError("regret-table needs --input or --fixture")
        path = Path(args.input)
        if not path.exists():
            raise ConfigError(f"input {path} does not exist")
        records = analysis.read_regret_records(path) if path.is_file() else _records_from_runs(path)
    table = analysis.aggregate_normalized_regret(records)
    outdir = _OutputDir(_resolve_out(args, "regret-table"))
    analysis.write_regret_table(table, outdir.tmp / "regret_table.csv")
    analysis.write_regret_records(records, outdir.tmp / "regret_records.csv")
    outdir.finalize("regret-table", {"input": str(args.input or "fixture")}, [])
    header = "offline_alg " + " ".join(f"{on:>8s}" for on in table.online_algs)
    print(header)
    for off in table.offline_algs:
        cells = " ".join(f"{table.averaged[(off, on)]:8.3f}" for on in table.online_algs)
        print(f"{off:11s} {cells}")
    print(f"wrote table to {outdir.out}")
    return 0


def _cmd_verify_identity(args) -> int:
    center = args.center
    grid = np.linspace(center - 4.0, center + 4.0, args.grid_points)
    gap = verify_maxent_identity(lambda a: -0.5 * (a - center) ** 2, args.alpha, grid)
    outdir = _OutputDir(_resolve_out(args, "verify-identity"))
    (outdir.tmp / "gap.txt").write_text(f"{format(gap, '.17g')}\n", encoding="utf-8")
    outdir.finalize(
        "verify-identity",
        {"alpha": args.alpha, "center": center, "grid_points": args.grid_points},
        [],
    )
    print(f"max-entropy identity sup-norm gap: {gap:.3e}")
    return 0


def _cmd_export_checkpoints(args) -> int:
    params = []
    for path in args.checkpoints:
        agent = pipeline.load_checkpoint(path)
        params.append(agent.policy.params)
    outdir = _OutputDir(_resolve_out(args, "export-checkpoints"))
    analysis.export_checkpoint_matrix(params, outdir.tmp / "checkpoint_matrix.csv")
    outdir.finalize("export-checkpoints", {"checkpoints": [str(p) for p in args.checkpoints]}, [])
    print(f"wrote {len(params)} x {params[0].values.size} matrix to {outdir.out}")
    return 0


# ----------------------------------------------------------------------
# Argument parsing
# ----------------------------------------------------------------------


def _add_common(sub):
    sub.add_argument("--config", help="path to the JSON experiment config")
    sub.add_argument(
        "--override",
        action="append",
        default=[],
        metavar="KEY=VALUE",
        help="dotted-path config override (repeatable, last wins)",
    )
    sub.add_argument("--out", help="output directory (default under O2OLAB_OUT or ./runs)")
    sub.add_argument("--seed", type=int, help="run a single seed instead of config.seeds")
    sub.add_argument("--jobs", type=int, default=1, help="parallel seed workers")


def build_parser() -> argparse.ArgumentParser:
    parser = argparse.ArgumentParser(
        prog="o2olab", description="Offline-to-online RL laboratory"
    )
    sub = parser.add_subparsers(dest="command", required=True)

    p = sub.add_parser("gen-data", help="generate an offline dataset with the scripted behavior")
    _add_common(p)
    p.set_defaults(func=_cmd_gen_data)

    p = sub.add_parser("train-diffusion", help="train the outcome-conditioned score model")
    _add_common(p)
    p.add_argument("--data", required=True, help="dataset file")
    p.set_defaults(func=_cmd_train_diffusion)

    p = sub.add_parser("pretrain", help="offline pre-training")
    _add_common(p)
    p.add_argument("--data", required=True)
    p.add_argument("--diffusion", help="score model checkpoint (needed for smac)")
    p.set_defaults(func=_cmd_pretrain)

    p = sub.add_parser("finetune", help="online fine-tuning from a checkpoint")
    _add_common(p)
    p.add_argument("--data", required=True)
    p.add_argument("--checkpoint", required=True, help="checkpoint file or pretrain output dir")
    p.set_defaults(func=_cmd_finetune)

    p = sub.add_parser("landscape-line", help="evaluate along the line between two checkpoints")
    _add_common(p)
    p.add_argument("--checkpoint-a", required=True)
    p.add_argument("--checkpoint-b", required=True)
    p.add_argument("--points", type=int, default=11)
    p.add_argument("--t-lo", type=float, default=0.0)
    p.add_argument("--t-hi", type=float, default=1.0)
    p.set_defaults(func=_cmd_landscape_line)

    p = sub.add_parser("landscape-plane", help="evaluate a plane spanned by three checkpoints")
    _add_common(p)
    p.add_argument("--checkpoint-a", required=True)
    p.add_argument("--checkpoint-b", required=True)
    p.add_argument("--checkpoint-c", required=True)
    p.add_argument("--resolution", type=int, default=15)
    p.add_argument("--grid-lo", type=float, default=-0.2)
    p.add_argument("--grid-hi", type=float, default=1.2)
    p.set_defaults(func=_cmd_landscape_plane)

    p = sub.add_parser("regret-table", help="aggregate normalized regret over runs")
    _add_common(p)
    p.add_argument("--input", help="regret records CSV or a directory of finetune runs")
    p.add_argument(
        "--fixture", action="store_true", help="use the bundled published-regret fixture"
    )
    p.set_defaults(func=_cmd_regret_table)

    p = sub.add_parser("verify-identity", help="check the max-entropy score identity by quadrature")
    _add_common(p)
    p.add_argument("--alpha", type=float, default=1.0)
    p.add_argument("--center", type=float, default=0.25, help="peak of the bundled quadratic Q")
    p.add_argument("--grid-points", type=int, default=2001)
    p.set_defaults(func=_cmd_verify_identity)

    p = sub.add_parser("export-checkpoints", help="dump actor parameters as a matrix")
    _add_common(p)
    p.add_argument("checkpoints", nargs="+", help="agent checkpoint files")
    p.set_defaults(func=_cmd_export_checkpoints)

    return parser


def main(argv=None) -> int:
    parser = build_parser()
    args = parser.parse_args(argv)
    try:
        return args.func(args)
    except NumericError as exc:
        print(f"numeric abort: {exc}", file=sys.stderr)
        return 3
    except (ConfigError, FormatError, ValueError, OSError) as exc:
        print(f"config error: {exc}", file=sys.stderr)
        return 2


if __name__ == "__main__":
    sys.exit(main())
