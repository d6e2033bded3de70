"""Experiment orchestration CLI: pretrain, finetune, sweep, eval, analyze.

Exit codes are a stable scripting contract: 0 success, 2 config error,
3 lineage error, 4 runtime failure. Run output lands under the configured
``run.out_root`` (overridable with the LORASA_RUN_ROOT environment
variable), one subdirectory per seed, with an append-only ledger making
re-runs of completed (config, seed) pairs no-ops unless forced.
"""

from __future__ import annotations

import argparse
import json
import sys
from concurrent.futures import ProcessPoolExecutor
from pathlib import Path

import numpy as np

from . import analysis, runio
from .checkpoint import CheckpointError, read_checkpoint, read_meta
from .config import (
    ConfigError,
    RunConfig,
    config_hash,
    lineage_hash,
    load_config,
)
from .envs import make_env
from .nn import ActionSpec, ActorArchitecture, ActorParams
from .numerics import Array
from .trainers import (
    LineageError,
    PolicyProvider,
    evaluate,
    finetune_lora,
    merged_provider,
    pretrain_shared,
)

EXIT_OK = 0
EXIT_CONFIG = 2
EXIT_LINEAGE = 3
EXIT_RUNTIME = 4

RANK_SWEEP_DEFAULT = ("2", "4", "8", "full")
CHECKPOINT_SWEEP_DEFAULT = ("0.25", "0.5", "0.75")
PLACEMENT_SWEEP_DEFAULT = ("fc1-only", "gru-only", "post-only", "head-only", "all")


def main(argv: list[str] | None = None) -> int:
    parser = _build_parser()
    args = parser.parse_args(argv)
    try:
        return args.func(args)
    except ConfigError as exc:
        print(f"config error: {exc}", file=sys.stderr)
        return EXIT_CONFIG
    except LineageError as exc:
        print(f"lineage error: {exc}", file=sys.stderr)
        return EXIT_LINEAGE
    except CheckpointError as exc:
        print(f"checkpoint error: {exc}", file=sys.stderr)
        return EXIT_RUNTIME
    except Exception as exc:  # noqa: BLE001 - contract: nonzero on any failure
        print(f"error: {exc}", file=sys.stderr)
        return EXIT_RUNTIME


def _build_parser() -> argparse.ArgumentParser:
    parser = argparse.ArgumentParser(prog="lorasa",
                                     description=__doc__.splitlines()[0])
    sub = parser.add_subparsers(required=True)

    p = sub.add_parser("pretrain", help="phase 1: train the shared backbone(s)")
    p.add_argument("config")
    p.add_argument("--force", action="store_true",
                   help="re-run seeds already marked completed")
    p.add_argument("--parallel-seeds", action="store_true",
                   help="fan seeds across processes (never threads)")
    p.set_defaults(func=cmd_pretrain)

    p = sub.add_parser("finetune", help="phase 2: per-agent adapter fine-tuning")
    p.add_argument("config")
    p.add_argument("--from", dest="from_ckpt", default=None,
                   help="pretraining checkpoint (default: resolve "
                        "phase.finetune_from milestone)")
    p.add_argument("--rank", default=None, help="override regime.lora_rank")
    p.add_argument("--placement", default=None, help="override regime.lora_placement")
    p.add_argument("--force", action="store_true")
    p.add_argument("--parallel-seeds", action="store_true")
    p.set_defaults(func=cmd_finetune)

    p = sub.add_parser("sweep", help="ablation sweep over rank/checkpoint/placement")
    p.add_argument("config")
    p.add_argument("--axis", required=True, choices=("rank", "checkpoint", "placement"))
    p.add_argument("--values", nargs="*", default=None)
    p.add_argument("--force", action="store_true")
    p.set_defaults(func=cmd_sweep)

    p = sub.add_parser("eval", help="evaluate a checkpoint or merged-policy dir")
    p.add_argument("config")
    p.add_argument("--ckpt", required=True)
    p.add_argument("--episodes", type=int, default=None)
    p.add_argument("--seed", type=int, default=None)
    p.set_defaults(func=cmd_eval)

    p = sub.add_parser("analyze", help="norms, sparsity, distances, heatmaps, efficiency")
    p.add_argument("run_dirs", nargs="+",
                   help="seed directories: one pretraining reference plus "
                        "fine-tune run(s)")
    p.add_argument("--out", default=None, help="output dir (default: first run dir)")
    p.add_argument("--probes", type=int, default=512)
    p.add_argument("--probe-seed", type=int, default=4242)
    p.set_defaults(func=cmd_analyze)
    return parser


# ---------------------------------------------------------------------------
# pretrain / finetune
# ---------------------------------------------------------------------------

def _pretrain_one(cfg: RunConfig, seed: int) -> str:
    seed_dir = cfg.run_dir() / f"seed_{seed}"
    result = pretrain_shared(cfg, seed, seed_dir)
    latest = max(result["checkpoints"].items(), key=lambda kv: kv[0])[1]
    return str(latest)


def cmd_pretrain(args) -> int:
    cfg = load_config(args.config)
    run_dir = cfg.run_dir()
    run_dir.mkdir(parents=True, exist_ok=True)
    (run_dir / "config.cfg").write_text(Path(args.config).read_text())
    todo = []
    for seed in cfg.seeds:
        if not args.force and runio.seed_status(run_dir, "pretrain", seed) == "completed":
            print(f"seed {seed}: already completed, skipping (use --force to redo)")
            continue
        todo.append(seed)
    if args.parallel_seeds and len(todo) > 1:
        with ProcessPoolExecutor(max_workers=min(len(todo), 4)) as pool:
            futures = {seed: pool.submit(_pretrain_one, cfg, seed) for seed in todo}
            for seed in todo:
                _finish_seed(cfg, run_dir, "pretrain", seed, futures[seed].result)
    else:
        for seed in todo:
            _finish_seed(cfg, run_dir, "pretrain", seed, lambda s=seed: _pretrain_one(cfg, s))
    return EXIT_OK


def _finish_seed(cfg: RunConfig, run_dir: Path, phase: str, seed: int, work) -> None:
    try:
        artifact = work()
    except Exception:
        runio.record_seed(run_dir, phase, seed, "failed", config_hash(cfg),
                          lineage_hash(cfg))
        raise
    runio.record_seed(run_dir, phase, seed, "completed", config_hash(cfg),
                      lineage_hash(cfg), [artifact])
    print(f"{phase} seed {seed}: completed -> {artifact}")


def resolve_milestone_ckpt(cfg: RunConfig, seed: int, fraction: float) -> Path:
    """Find the pretraining checkpoint written at the given milestone."""
    ckpt_dir = cfg.run_dir() / f"seed_{seed}" / "checkpoints"
    if not ckpt_dir.exists():
        raise LineageError(f"no pretraining checkpoints under {ckpt_dir}")
    for path in sorted(ckpt_dir.glob("step_*.ckpt")):
        meta = read_meta(path)
        if meta.get("phase") == "pretrain" and \
                abs(float(meta.get("milestone", -1)) - fraction) < 1e-12:
            return path
    raise LineageError(f"no milestone {fraction} checkpoint in {ckpt_dir}")


def _parse_rank(text: str | None) -> int | str | None:
    if text is None:
        return None
    if text == "full":
        return "full"
    rank = int(text)
    if rank < 1:
        raise ConfigError("--rank must be >= 1 (or 'full')")
    return rank


def _finetune_tag(rank, placement, fraction) -> str:
    return f"ft_r{rank}_{placement}_c{fraction:g}"


def _finetune_one(cfg: RunConfig, seed: int, from_ckpt: str | None,
                  rank, placement) -> str:
    fraction = cfg.phase_finetune_from
    ckpt = Path(from_ckpt) if from_ckpt else resolve_milestone_ckpt(cfg, seed, fraction)
    eff_rank = rank if rank is not None else cfg.regime_lora_rank
    eff_place = placement if placement is not None else cfg.regime_lora_placement
    seed_dir = cfg.run_dir() / f"seed_{seed}" / _finetune_tag(eff_rank, eff_place, fraction)
    result = finetune_lora(cfg, seed, seed_dir, ckpt, rank=rank, placement=placement)
    del result["trainer"]
    return str(seed_dir)


def cmd_finetune(args) -> int:
    cfg = load_config(args.config)
    if cfg.regime_kind not in ("ps-lora", "cluster-lora"):
        raise ConfigError(f"regime.kind {cfg.regime_kind!r} has no fine-tuning phase")
    rank = _parse_rank(args.rank)
    placement = args.placement
    run_dir = cfg.run_dir()
    run_dir.mkdir(parents=True, exist_ok=True)
    eff_rank = rank if rank is not None else cfg.regime_lora_rank
    eff_place = placement if placement is not None else cfg.regime_lora_placement
    phase_key = _finetune_tag(eff_rank, eff_place, cfg.phase_finetune_from)
    todo = []
    for seed in cfg.seeds:
        if not args.force and runio.seed_status(run_dir, phase_key, seed) == "completed":
            print(f"seed {seed}: already completed, skipping (use --force to redo)")
            continue
        todo.append(seed)
    if args.parallel_seeds and len(todo) > 1:
        with ProcessPoolExecutor(max_workers=min(len(todo), 4)) as pool:
            futures = {s: pool.submit(_finetune_one, cfg, s, args.from_ckpt,
                                      rank, placement) for s in todo}
            for seed in todo:
                _finish_seed(cfg, run_dir, phase_key, seed, futures[seed].result)
    else:
        for seed in todo:
            _finish_seed(cfg, run_dir, phase_key, seed,
                         lambda s=seed: _finetune_one(cfg, s, args.from_ckpt,
                                                      rank, placement))
    return EXIT_OK


# ---------------------------------------------------------------------------
# sweep
# ---------------------------------------------------------------------------

def cmd_sweep(args) -> int:
    cfg = load_config(args.config)
    if cfg.regime_kind not in ("ps-lora", "cluster-lora"):
        raise ConfigError("sweeps fine-tune adapters; regime.kind must be a lora regime")
    defaults = {"rank": RANK_SWEEP_DEFAULT, "checkpoint": CHECKPOINT_SWEEP_DEFAULT,
                "placement": PLACEMENT_SWEEP_DEFAULT}
    values = tuple(args.values) if args.values else defaults[args.axis]
    run_dir = cfg.run_dir()
    run_dir.mkdir(parents=True, exist_ok=True)

    # The base pretraining run must exist; produce it if not.
    for seed in cfg.seeds:
        if runio.seed_status(run_dir, "pretrain", seed) != "completed":
            _finish_seed(cfg, run_dir, "pretrain", seed,
                         lambda s=seed: _pretrain_one(cfg, s))

    rows: list[dict] = []
    for value in values:
        for seed in cfg.seeds:
            rank: int | str | None = None
            placement: str | None = None
            fraction = cfg.phase_finetune_from
            if args.axis == "rank":
                rank = _parse_rank(value)
            elif args.axis == "placement":
                placement = value
            else:
                fraction = float(value)
                if not 0.0 < fraction <= 1.0:
                    raise ConfigError("checkpoint sweep values must be fractions in (0, 1]")
            ckpt = resolve_milestone_ckpt(cfg, seed, fraction)
            eff_rank = rank if rank is not None else cfg.regime_lora_rank
            eff_place = placement if placement is not None else cfg.regime_lora_placement
            seed_dir = run_dir / f"seed_{seed}" / _finetune_tag(eff_rank, eff_place, fraction)
            phase_key = _finetune_tag(eff_rank, eff_place, fraction)
            final_eval = None
            if not args.force and runio.seed_status(run_dir, phase_key, seed) == "completed":
                header, data = runio.read_csv_rows(seed_dir / "eval_log.csv")
                final_eval = dict(zip(header, data[-1]))
            else:
                import copy
                cfg_cell = copy.deepcopy(cfg)
                cfg_cell.phase_finetune_from = fraction
                cfg_cell.raw_items["phase.finetune_from"] = repr(fraction)
                result = finetune_lora(cfg_cell, seed, seed_dir, ckpt,
                                       rank=rank, placement=placement)
                runio.record_seed(run_dir, phase_key, seed, "completed",
                                  config_hash(cfg), lineage_hash(cfg), [str(seed_dir)])
                final_eval = {k: repr(v) for k, v in result["final_eval"].items()}
            rows.append({"value": value, "seed": seed,
                         "mean_return": float(final_eval["mean_return"]),
                         "median_return": float(final_eval["median_return"]),
                         "success_rate": float(final_eval["success_rate"]),
                         "mean_length": float(final_eval["mean_length"])})

    # Per-value medians over seeds, attached to every row of that value.
    by_value: dict[str, list[dict]] = {}
    for row in rows:
        by_value.setdefault(str(row["value"]), []).append(row)
    out_path = run_dir / f"sweep_{args.axis}.csv"
    header = ("value", "seed", "mean_return", "median_return", "success_rate",
              "mean_length", "seeds_median_return", "seeds_median_success")
    comments = [f"config_hash={config_hash(cfg)}", f"lineage_hash={lineage_hash(cfg)}",
                f"axis={args.axis}", f"values={','.join(str(v) for v in values)}",
                f"seeds={','.join(str(s) for s in cfg.seeds)}",
                "grid=desk-scale analog; full rank = per-layer min dimension"]
    with runio.CsvLogger(out_path, header, comments) as log:
        for row in rows:
            group = by_value[str(row["value"])]
            log.row({**row,
                     "seeds_median_return": float(np.median([r["median_return"]
                                                             for r in group])),
                     "seeds_median_success": float(np.median([r["success_rate"]
                                                              for r in group]))})
    print(f"sweep written: {out_path}")
    return EXIT_OK


# ---------------------------------------------------------------------------
# eval
# ---------------------------------------------------------------------------

def _arch_from_meta(meta: dict) -> ActorArchitecture:
    a = meta["arch"]
    return ActorArchitecture(obs_dim=a["obs_dim"],
                             action=ActionSpec(a["action_kind"], a["action_n"]),
                             id_dim=a["id_dim"], hidden_dim=a["hidden_dim"])


def provider_from_checkpoint(cfg: RunConfig, path: Path,
                             ) -> tuple[PolicyProvider, ActorArchitecture]:
    """Build an inference provider from a trainer checkpoint or a merged dir."""
    if path.is_dir():
        actor_files = sorted(path.glob("agent_*.ckpt"))
        if not actor_files:
            raise CheckpointError(f"no agent_*.ckpt files in {path}")
        actors, arch = [], None
        for f in actor_files:
            arrays, meta = read_checkpoint(f)
            arch = _arch_from_meta(meta)
            flat = {k: v.astype(np.float64) for k, v in arrays.items()}
            actors.append(ActorParams.from_flat(flat))
        return merged_provider(arch, actors), arch
    arrays, meta = read_checkpoint(path)
    arch = _arch_from_meta(meta)
    n_agents = cfg.env_n_agents
    cluster_map = cfg.cluster_map
    backbones: dict[int, ActorParams] = {}
    for c in sorted(set(cluster_map)):
        flat = {k[len(f"backbone{c}."):]: v for k, v in arrays.items()
                if k.startswith(f"backbone{c}.")}
        backbones[c] = ActorParams.from_flat(flat)
    per_agent = []
    for i in range(n_agents):
        params = backbones[cluster_map[i]]
        override = None
        adapter_keys = [k for k in arrays if k.startswith(f"adapters{i}.A.")]
        if adapter_keys:
            override = {}
            for key in adapter_keys:
                layer = key.split(".")[-1]
                a = arrays[f"adapters{i}.A.{layer}"]
                b = arrays[f"adapters{i}.B.{layer}"]
                override[layer] = params.w[layer] + a @ b
        elif f"mtl_head{i}.head" in arrays:
            override = {k.split(".")[-1]: arrays[k] for k in arrays
                        if k.startswith(f"mtl_head{i}.")}
        per_agent.append((params, override))
    return PolicyProvider(arch, per_agent), arch


def cmd_eval(args) -> int:
    cfg = load_config(args.config)
    provider, arch = provider_from_checkpoint(cfg, Path(args.ckpt))
    env_kwargs: dict = {"n_agents": cfg.env_n_agents}
    if cfg.env_id.endswith("grid"):
        env_kwargs["size"] = cfg.env_grid_size
    if cfg.env_episode_limit:
        env_kwargs["episode_limit"] = cfg.env_episode_limit
    metrics = evaluate(provider, lambda: make_env(cfg.env_id, **env_kwargs),
                       args.episodes or cfg.eval_episodes,
                       cfg.eval_seed if args.seed is None else args.seed,
                       id_dim=arch.id_dim, hidden_dim=arch.hidden_dim)
    print(json.dumps(metrics, sort_keys=True))
    return EXIT_OK


# ---------------------------------------------------------------------------
# analyze
# ---------------------------------------------------------------------------

def _load_run_dir(seed_dir: Path) -> dict:
    """Classify a seed directory and load what analysis needs from it."""
    ckpts = sorted((seed_dir / "checkpoints").glob("*.ckpt"))
    if not ckpts:
        raise CheckpointError(f"no checkpoints under {seed_dir}")
    final = ckpts[-1]
    for path in ckpts:  # prefer the latest-step checkpoint
        if _ckpt_step(path) > _ckpt_step(final):
            final = path
    arrays, meta = read_checkpoint(final)
    return {"dir": seed_dir, "arrays": arrays, "meta": meta, "ckpt": final}


def _ckpt_step(path: Path) -> int:
    try:
        return int(path.stem.split("_")[-1])
    except ValueError:
        return -1


def cmd_analyze(args) -> int:
    runs = [_load_run_dir(Path(d)) for d in args.run_dirs]
    arch_keys = {json.dumps(r["meta"]["arch"], sort_keys=True) for r in runs}
    if len(arch_keys) != 1:
        raise LineageError("run directories disagree on architecture; refusing to mix")
    lineages = {r["meta"].get("lineage_hash") for r in runs}
    if len(lineages) > 2:  # reference run may differ in regime, not in shape
        raise LineageError("too many distinct lineages across run directories")

    references = [r for r in runs if r["meta"]["phase"] == "pretrain"]
    finetunes = [r for r in runs if r["meta"]["phase"] == "finetune"]
    if not finetunes:
        raise CheckpointError("analyze needs at least one fine-tune run directory")
    reference = references[0] if references else None

    out_dir = Path(args.out) if args.out else Path(args.run_dirs[0]) / "analysis"
    out_dir.mkdir(parents=True, exist_ok=True)
    arch = _arch_from_meta(finetunes[0]["meta"])
    hashes = sorted({r["meta"].get("config_hash", "?") for r in runs})
    comments = [f"config_hashes={'+'.join(hashes)}",
                f"probe_seed={args.probe_seed}", f"probes={args.probes}"]

    _write_norms(out_dir, arch, reference, finetunes, comments)
    first = finetunes[0]
    shared, adapter_sets, merged = _unpack_finetune(arch, first)
    _write_sparsity(out_dir, shared, adapter_sets, comments)

    env_meta = dict(first["meta"].get("env", {}))
    env_id = env_meta.pop("id", "hetero-grid")
    n_agents = len(merged)
    env_factory = lambda: make_env(env_id, **env_meta)  # noqa: E731
    probes = analysis.collect_probe_states(
        merged_provider(arch, [shared] * n_agents), env_factory, args.probes,
        args.probe_seed, id_dim=arch.id_dim, hidden_dim=arch.hidden_dim)

    dmat = analysis.policy_distance_matrix(arch, merged, probes,
                                           probe_seed=args.probe_seed,
                                           source=str(first["dir"]))
    with runio.CsvLogger(out_dir / "wasserstein.csv",
                         ("agent_i", "agent_j", "distance"), comments) as log:
        for i in range(n_agents):
            for j in range(n_agents):
                log.row({"agent_i": i, "agent_j": j,
                         "distance": float(dmat.matrix[i, j])})

    per_agent, cosine = analysis.activation_heatmap(arch, merged, probes)
    unit_cols = tuple(f"unit_{u}" for u in range(arch.hidden_dim))
    for i, layers in enumerate(per_agent):
        with runio.CsvLogger(out_dir / f"heatmap_agent{i}.csv",
                             ("layer",) + unit_cols, comments) as log:
            for layer, values in layers.items():
                log.row({"layer": layer,
                         **{f"unit_{u}": float(v) for u, v in enumerate(values)}})
    with runio.CsvLogger(out_dir / "heatmap_cosine.csv",
                         ("layer", "agent_i", "agent_j", "cosine"), comments) as log:
        for layer, mat in cosine.items():
            for i in range(n_agents):
                for j in range(n_agents):
                    log.row({"layer": layer, "agent_i": i, "agent_j": j,
                             "cosine": float(mat[i, j])})

    _write_efficiency(out_dir, arch, runs, comments)
    print(f"analysis written: {out_dir}")
    return EXIT_OK


def _unpack_finetune(arch: ActorArchitecture, run: dict,
                     ) -> tuple[ActorParams, list, list[ActorParams]]:
    from .lora import AdapterSet, LoraAdapter

    arrays = run["arrays"]
    shared = ActorParams.from_flat(
        {k[len("backbone0."):]: v for k, v in arrays.items()
         if k.startswith("backbone0.")})
    adapter_sets, merged = [], []
    i = 0
    while any(k.startswith(f"adapters{i}.") for k in arrays):
        layers = sorted({k.split(".")[-1] for k in arrays
                         if k.startswith(f"adapters{i}.A.")},
                        key=lambda l: arch.layer_names.index(l))
        adapters = {l: LoraAdapter(l, arrays[f"adapters{i}.A.{l}"],
                                   arrays[f"adapters{i}.B.{l}"]) for l in layers}
        rank = adapters[layers[0]].rank if layers else 0
        aset = AdapterSet(agent_id=i, rank=rank, placement=tuple(layers),
                          adapters=adapters)
        adapter_sets.append(aset)
        from .lora import merge
        merged.append(merge(shared, aset))
        i += 1
    if not adapter_sets:
        raise CheckpointError(f"{run['ckpt']}: no adapters found in fine-tune checkpoint")
    return shared, adapter_sets, merged


def _write_norms(out_dir: Path, arch: ActorArchitecture, reference: dict | None,
                 finetunes: list[dict], comments: list[str]) -> None:
    header = ("source", "layer", "norm_reference", "norm_shared",
              "norm_merged_mean", "norm_delta_mean")
    ref_params = None
    if reference is not None:
        ref_params = ActorParams.from_flat(
            {k[len("backbone0."):]: v for k, v in reference["arrays"].items()
             if k.startswith("backbone0.")})
    with runio.CsvLogger(out_dir / "norms.csv", header, comments) as log:
        for run in finetunes:
            shared, adapter_sets, _ = _unpack_finetune(arch, run)
            table = analysis.layer_norms(ref_params if ref_params is not None else shared,
                                         shared, adapter_sets, arch)
            for row in table.rows:
                log.row({"source": run["dir"].name, "layer": row.layer,
                         "norm_reference": row.reference, "norm_shared": row.shared,
                         "norm_merged_mean": row.merged_mean,
                         "norm_delta_mean": row.delta_mean})


def _write_sparsity(out_dir: Path, shared: ActorParams, adapter_sets: list,
                    comments: list[str]) -> None:
    shared_curve = analysis.sparsity_curve(list(shared.w.values()))
    deltas = [ad.delta() for aset in adapter_sets for ad in aset.adapters.values()]
    delta_curve = analysis.sparsity_curve(deltas)
    header = ("collection", "index", "threshold", "percent_at_or_above")
    with runio.CsvLogger(out_dir / "sparsity.csv", header, comments) as log:
        for name, curve in (("shared", shared_curve), ("delta", delta_curve)):
            for idx in range(curve.thresholds.size):
                log.row({"collection": name, "index": idx,
                         "threshold": float(curve.thresholds[idx]),
                         "percent_at_or_above": float(curve.percent[idx])})


def _write_efficiency(out_dir: Path, arch: ActorArchitecture, runs: list[dict],
                      comments: list[str]) -> None:
    entries = []
    for run in runs:
        meta = run["meta"]
        wall_total, steps = _wall_from_log(run["dir"] / "train_log.csv")
        entry = {"label": run["dir"].name, "regime": meta.get("regime", "?"),
                 "phase": meta["phase"], "arch": arch,
                 "n_agents": int(meta.get("n_agents", 3)),
                 "wall_ms_total": wall_total, "env_steps": steps}
        if meta["phase"] == "finetune":
            aset_rank = _rank_from_arrays(run["arrays"])
            entry["rank"] = aset_rank
            entry["placement"] = _placement_from_arrays(run["arrays"], arch)
        entries.append(entry)
    rows = analysis.efficiency_report(entries)
    header = ("label", "regime", "phase", "trainable_params", "wall_ms_per_1k_steps")
    with runio.CsvLogger(out_dir / "efficiency.csv", header, comments) as log:
        for row in rows:
            log.row({"label": row.label, "regime": row.regime, "phase": row.phase,
                     "trainable_params": row.trainable_params,
                     "wall_ms_per_1k_steps": row.wall_ms_per_1k_steps})


def _rank_from_arrays(arrays: dict[str, Array]) -> int:
    for k, v in arrays.items():
        if k.startswith("adapters0.A."):
            return v.shape[1]
    return 0


def _placement_from_arrays(arrays: dict[str, Array],
                           arch: ActorArchitecture) -> tuple[str, ...]:
    layers = sorted({k.split(".")[-1] for k in arrays if k.startswith("adapters0.A.")},
                    key=lambda l: arch.layer_names.index(l))
    return tuple(layers)


def _wall_from_log(path: Path) -> tuple[float, int]:
    if not path.exists():
        return float("nan"), 0
    header, rows = runio.read_csv_rows(path)
    if not rows:
        return float("nan"), 0
    wall_idx = header.index("wall_ms")
    step_idx = header.index("step")
    total = sum(float(r[wall_idx]) for r in rows)
    return total, int(rows[-1][step_idx])


if __name__ == "__main__":
    sys.exit(main())
