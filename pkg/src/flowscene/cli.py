"""Pipeline command line.

Subcommands: synth, train-vae, train-flow, generate, evaluate, render.
Configuration comes from an optional JSON file (one section per command)
with CLI flags winning over file values. Every run writes a manifest
embedding the resolved config plus sha256 hashes of input and output
files, so any artifact is traceable. Exit codes: 0 success, 1 usage or
configuration error, 2 data error, 3 numerical failure.

The FLOWSCENE_LOG environment variable (debug | info | warning | quiet)
controls log verbosity and nothing else.
"""

from __future__ import annotations

import argparse
import concurrent.futures
import dataclasses
import json
import logging
import os
import sys
from typing import Sequence

import numpy as np

from . import flow as flow_mod
from . import geom, metrics
from . import synth as synth_mod
from .cvae import BackboneConfig, CvaeConfig, CvaeModel, VaeTrainConfig, train_vae
from .errors import ConfigError, DataError, FlowsceneError, NumericalError
from .flow import FlowConfig, FlowTrainConfig, train_flow
from .scenario_io import file_sha256, load_pool, save_pool
from .scene import ManeuverLabel, Scenario

log = logging.getLogger("flowscene")

SCHEMA_VERSION = 1

COMMANDS = ("synth", "train-vae", "train-flow", "generate", "evaluate",
            "render")

DEFAULTS: dict[str, dict] = {
    "synth": {
        "out_dir": None,
        "map": "highway",
        "n_nominal": 50,
        "n_critical": 50,
        "n_real": 50,
        "n_actors": 4,
        "seed": 0,
        "n_workers": 1,
        "ttc_very": 1.5,
        "ttc_safety": 3.0,
        "decel_very": 6.0,
        "decel_safety": 3.0,
    },
    "train-vae": {
        "pools": None,
        "checkpoint": None,
        "log_path": None,
        "steps": 2000,
        "lr": 3e-4,
        "seed": 0,
        "d_z": 16,
        "d_model": 64,
        "n_heads": 4,
        "n_blocks": 2,
        "beta": 0.5,
    },
    "train-flow": {
        "vae_checkpoint": None,
        "sim_pool": None,
        "real_pool": None,
        "alpha_real": 0.0,
        "upsample_real": 1,
        "checkpoint": None,
        "log_path": None,
        "steps": 2000,
        "lr": 3e-4,
        "seed": 0,
        "n_heads": 4,
        "n_blocks": 2,
        "n_sample_steps": 20,
        "conditioning": True,
    },
    "generate": {
        "vae_checkpoint": None,
        "flow_checkpoint": None,
        "scenarios": None,
        "out": None,
        "label": "none",
        "t_end_grid": [1.0],
        "seed": 0,
        "n_workers": 1,
        "limit": None,
        "n_sample_steps": None,
    },
    "evaluate": {
        "generated": None,
        "reference": None,
        "out": None,
    },
    "render": {
        "scenarios": None,
        "out": None,
        "index": 0,
        "scenario_id": None,
        "snapshots": 6,
        "scale": 6.0,
    },
}

LABEL_NAMES = {
    "none": None,
    "nominal": ManeuverLabel.NOMINAL,
    "safety_critical": ManeuverLabel.SAFETY_CRITICAL,
    "very_safety_critical": ManeuverLabel.VERY_SAFETY_CRITICAL,
}


# ------------------------------------------------------------ config files

def _load_file_config(path: str, command: str) -> dict:
    try:
        with open(path) as fh:
            doc = json.load(fh)
    except OSError as e:
        raise ConfigError(f"cannot read config file: {e}")
    except json.JSONDecodeError as e:
        raise ConfigError(f"config file {path} is not valid JSON: {e}")
    if not isinstance(doc, dict):
        raise ConfigError(f"config file {path} must hold a JSON object")
    version = doc.get("schema_version", SCHEMA_VERSION)
    if version != SCHEMA_VERSION:
        raise ConfigError(f"config schema_version {version} unsupported "
                          f"(expected {SCHEMA_VERSION})")
    known = {c.replace("-", "_") for c in COMMANDS} | {"schema_version"}
    unknown = set(doc) - known
    if unknown:
        raise ConfigError(f"unknown config sections: {sorted(unknown)}")
    section = doc.get(command.replace("-", "_"), {})
    if not isinstance(section, dict):
        raise ConfigError(f"config section {command} must be an object")
    return section


def _resolve(command: str, args: argparse.Namespace) -> dict:
    """Defaults, then config-file section, then CLI flags; flags win."""
    resolved = dict(DEFAULTS[command])
    if getattr(args, "config", None):
        section = _load_file_config(args.config, command)
        unknown = set(section) - set(resolved)
        if unknown:
            raise ConfigError(f"unknown keys in config section "
                              f"{command}: {sorted(unknown)}")
        resolved.update(section)
    for key in resolved:
        value = getattr(args, key, None)
        if value is not None:
            resolved[key] = value
    return resolved


def _require(cfg: dict, *keys: str):
    for key in keys:
        if cfg[key] is None:
            raise ConfigError(f"missing required setting: {key}")


# -------------------------------------------------------------- manifests

def _hash_entry(path: str) -> dict:
    return {"path": str(path), "sha256": file_sha256(path)}


def _write_manifest(path: str, command: str, config: dict,
                    inputs: dict[str, str], outputs: dict[str, str],
                    stats: dict | None = None):
    doc = {
        "schema_version": SCHEMA_VERSION,
        "command": command,
        "config": config,
        "inputs": {k: _hash_entry(p) for k, p in sorted(inputs.items())},
        "outputs": {k: _hash_entry(p) for k, p in sorted(outputs.items())},
    }
    if stats is not None:
        doc["stats"] = stats
    with open(path, "w") as fh:
        json.dump(doc, fh, indent=2, sort_keys=True)
        fh.write("\n")
    log.info("manifest written to %s", path)


# ------------------------------------------------------------------ synth

def _map_graph(name: str):
    if name == "highway":
        return synth_mod.highway_graph(), synth_mod.HIGHWAY_SYNTH
    if name == "urban":
        return synth_mod.urban_graph(), synth_mod.URBAN_SYNTH
    raise ConfigError(f"unknown map preset {name!r} "
                      f"(expected highway or urban)")


def _pool_seed(seed: int, k: int) -> int:
    # independent master seed per pool, stable in the run seed
    return int(np.random.SeedSequence([seed, k]).generate_state(1)[0])


def _build_pool(entry_fn, n: int, n_workers: int):
    """Run pool entries serially or in a thread pool; entries are
    index-seeded, so both orders yield identical pools."""
    per_entry: list = [None] * n

    def run(i: int):
        stats = synth_mod.PoolStats()
        scenario = entry_fn(i, stats)
        return scenario, stats

    if n_workers <= 1:
        results = [run(i) for i in range(n)]
    else:
        with concurrent.futures.ThreadPoolExecutor(n_workers) as pool:
            results = list(pool.map(run, range(n)))
    merged = synth_mod.PoolStats()
    for i, (scenario, stats) in enumerate(results):
        per_entry[i] = scenario
        merged.merge(stats)
    return per_entry, merged


def cmd_synth(cfg: dict) -> int:
    _require(cfg, "out_dir")
    graph, synth_cfg = _map_graph(cfg["map"])
    thresholds = synth_mod.LabelThresholds(
        ttc_very=cfg["ttc_very"], ttc_safety=cfg["ttc_safety"],
        decel_very=cfg["decel_very"], decel_safety=cfg["decel_safety"])
    os.makedirs(cfg["out_dir"], exist_ok=True)
    seed, n_actors = cfg["seed"], cfg["n_actors"]

    def nominal_entry(i, stats):
        return synth_mod.nominal_pool_entry(
            graph, i, _pool_seed(seed, 0), synth_cfg, n_actors, stats=stats)

    def critical_entry(intensity, source, prefix, master, noise=0.0):
        run_cfg = dataclasses.replace(synth_cfg, control_noise_std=noise)

        def entry(i, stats):
            return synth_mod.critical_pool_entry(
                graph, i, master, run_cfg, n_actors,
                intensity_range=intensity, source=source,
                thresholds=thresholds, id_prefix=prefix, stats=stats)

        return entry

    from .scene import ScenarioSource
    plans = [
        ("nominal", cfg["n_nominal"], nominal_entry),
        ("critical_aggressive", cfg["n_critical"],
         critical_entry((0.7, 1.0), ScenarioSource.SIM_CRITICAL,
                        "critical-aggressive", _pool_seed(seed, 1))),
        ("critical_tuned", cfg["n_critical"],
         critical_entry((0.3, 0.7), ScenarioSource.SIM_CRITICAL,
                        "critical-tuned", _pool_seed(seed, 2))),
        ("real", cfg["n_real"],
         critical_entry((0.3, 0.7), ScenarioSource.REAL_CRITICAL,
                        "real", _pool_seed(seed, 3), noise=0.15)),
    ]
    outputs, stats_doc = {}, {}
    for name, count, entry_fn in plans:
        log.info("generating pool %s (%d scenarios)", name, count)
        scenarios, stats = _build_pool(entry_fn, count, cfg["n_workers"])
        path = os.path.join(cfg["out_dir"], f"{name}.jsonl")
        save_pool(path, scenarios)
        rate = metrics.near_miss(scenarios) if scenarios else 0.0
        outputs[name] = path
        stats_doc[name] = {
            "near_miss_rate": rate,
            "attempts": stats.attempts,
            "accepted": stats.accepted,
            "rejections": dict(sorted(stats.rejections.items())),
        }
        rejected = ", ".join(f"{k}={v}" for k, v in
                             sorted(stats.rejections.items())) or "none"
        print(f"{name}: {len(scenarios)} scenarios, near-miss rate "
              f"{rate:.3f}, attempts {stats.attempts}, rejected: {rejected}")
    _write_manifest(os.path.join(cfg["out_dir"], "manifest.json"),
                    "synth", cfg, {}, outputs, stats_doc)
    return 0


# --------------------------------------------------------------- training

def _uniform_stream(scenarios: Sequence[Scenario], seed: int):
    if not scenarios:
        raise ConfigError("training stream needs a non-empty pool")
    rng = np.random.default_rng(seed)
    while True:
        yield scenarios[int(rng.integers(len(scenarios)))]


def cmd_train_vae(cfg: dict) -> int:
    _require(cfg, "pools", "checkpoint")
    pool: list[Scenario] = []
    inputs = {}
    for i, path in enumerate(cfg["pools"]):
        part = load_pool(path)
        log.info("loaded %d scenarios from %s", len(part), path)
        pool.extend(part)
        inputs[f"pool_{i}"] = path
    model = CvaeModel(
        CvaeConfig(d_z=cfg["d_z"], beta=cfg["beta"],
                   backbone=BackboneConfig(d_model=cfg["d_model"],
                                           n_heads=cfg["n_heads"],
                                           n_blocks=cfg["n_blocks"])),
        seed=cfg["seed"])
    train_cfg = VaeTrainConfig(steps=cfg["steps"], lr=cfg["lr"],
                               seed=cfg["seed"])
    log_path = cfg["log_path"] or cfg["checkpoint"] + ".log.jsonl"
    _, records = train_vae(_uniform_stream(pool, cfg["seed"]), train_cfg,
                           model=model, checkpoint_path=cfg["checkpoint"],
                           log_path=log_path)
    print(f"trained VAE for {len(records)} steps; final loss "
          f"{records[-1].total:.4f} (reconstruction "
          f"{records[-1].reconstruction:.4f})")
    _write_manifest(cfg["checkpoint"] + ".manifest.json", "train-vae", cfg,
                    inputs, {"checkpoint": cfg["checkpoint"],
                             "log": log_path})
    return 0


def cmd_train_flow(cfg: dict) -> int:
    _require(cfg, "vae_checkpoint", "sim_pool", "checkpoint")
    if not os.path.exists(cfg["vae_checkpoint"]):
        raise ConfigError(
            f"stage order violation: VAE checkpoint "
            f"{cfg['vae_checkpoint']} does not exist; run train-vae first")
    from .cvae import load_cvae
    vae = load_cvae(cfg["vae_checkpoint"])
    sim = load_pool(cfg["sim_pool"])
    inputs = {"vae_checkpoint": cfg["vae_checkpoint"],
              "sim_pool": cfg["sim_pool"]}
    real: list[Scenario] = []
    if cfg["real_pool"]:
        real = load_pool(cfg["real_pool"])
        inputs["real_pool"] = cfg["real_pool"]
    stream = synth_mod.mix_sampler(
        real, sim, synth_mod.MixConfig(alpha_real=cfg["alpha_real"],
                                       seed=cfg["seed"],
                                       upsample_real=cfg["upsample_real"]))
    flow_cfg = FlowConfig(
        d_z=vae.cfg.d_z, d_model=vae.cfg.backbone.d_model,
        n_heads=cfg["n_heads"], n_blocks=cfg["n_blocks"],
        n_sample_steps=cfg["n_sample_steps"],
        conditioning=cfg["conditioning"])
    train_cfg = FlowTrainConfig(steps=cfg["steps"], lr=cfg["lr"],
                                seed=cfg["seed"])
    log_path = cfg["log_path"] or cfg["checkpoint"] + ".log.jsonl"
    _, records = train_flow(cfg["vae_checkpoint"], stream, train_cfg,
                            flow_cfg=flow_cfg,
                            checkpoint_path=cfg["checkpoint"],
                            log_path=log_path)
    print(f"trained flow for {len(records)} steps; final loss "
          f"{records[-1].loss:.6f}")
    _write_manifest(cfg["checkpoint"] + ".manifest.json", "train-flow", cfg,
                    inputs, {"checkpoint": cfg["checkpoint"],
                             "log": log_path})
    return 0


# -------------------------------------------------------------- generation

def cmd_generate(cfg: dict) -> int:
    _require(cfg, "vae_checkpoint", "flow_checkpoint", "scenarios", "out")
    for key in ("vae_checkpoint", "flow_checkpoint"):
        if not os.path.exists(cfg[key]):
            raise ConfigError(f"missing checkpoint: {cfg[key]}; train the "
                              f"pipeline stages first")
    if cfg["label"] not in LABEL_NAMES:
        raise ConfigError(f"unknown label {cfg['label']!r} (expected one of "
                          f"{sorted(LABEL_NAMES)})")
    label = LABEL_NAMES[cfg["label"]]
    grid = [float(t) for t in cfg["t_end_grid"]]
    for t in grid:
        if not 0.0 <= t <= 1.0:
            raise ConfigError(f"t_end {t} outside [0, 1]")
    vae, flow_model = flow_mod.load_generation_models(
        cfg["vae_checkpoint"], cfg["flow_checkpoint"])
    scenarios = load_pool(cfg["scenarios"])
    if cfg["limit"] is not None:
        scenarios = scenarios[:cfg["limit"]]
    if not scenarios:
        raise DataError(f"no scenarios in {cfg['scenarios']}")
    vae_sha = file_sha256(cfg["vae_checkpoint"])
    flow_sha = file_sha256(cfg["flow_checkpoint"])
    base_steps = cfg["n_sample_steps"] or flow_model.cfg.n_sample_steps
    seed = cfg["seed"]

    def run(i: int) -> list[Scenario]:
        s = scenarios[i]
        rng = np.random.default_rng(np.random.SeedSequence([seed, i]))
        noise = rng.standard_normal((s.n_actors, flow_model.cfg.d_z))
        rollouts = []
        for t_end in grid:
            sample_cfg = dataclasses.replace(
                flow_model.cfg, t_end=t_end, n_sample_steps=base_steps)
            result = flow_mod.generate(s, label, vae, flow_model,
                                       cfg=sample_cfg, noise=noise)
            rollouts.append(Scenario(
                scenario_id=s.scenario_id,
                lane_graph=s.lane_graph,
                actor_ids=s.actor_ids,
                history=s.history,
                future=result.states,
                dt=s.dt,
                ego_id=s.ego_id,
                source=s.source,
                label=label if label is not None else s.label,
                provenance={"generator": "flow", "t_end": t_end,
                            "label": cfg["label"], "seed": seed,
                            "noise_index": i, "vae_sha256": vae_sha,
                            "flow_sha256": flow_sha},
            ))
        return rollouts

    if cfg["n_workers"] <= 1:
        batches = [run(i) for i in range(len(scenarios))]
    else:
        with concurrent.futures.ThreadPoolExecutor(cfg["n_workers"]) as pool:
            batches = list(pool.map(run, range(len(scenarios))))
    rollouts = [r for batch in batches for r in batch]
    save_pool(cfg["out"], rollouts)
    print(f"generated {len(rollouts)} rollouts ({len(scenarios)} scenarios "
          f"x {len(grid)} t_end values) into {cfg['out']}")
    _write_manifest(cfg["out"] + ".manifest.json", "generate", cfg,
                    {"vae_checkpoint": cfg["vae_checkpoint"],
                     "flow_checkpoint": cfg["flow_checkpoint"],
                     "scenarios": cfg["scenarios"]},
                    {"rollouts": cfg["out"]})
    return 0


# -------------------------------------------------------------- evaluation

def _grouped_reports(generated: list[Scenario], reference: list[Scenario],
                     key: str):
    groups: dict = {}
    for s in generated:
        if s.provenance and key in s.provenance:
            groups.setdefault(s.provenance[key], []).append(s)
    rows = []
    for value in sorted(groups):
        rep = metrics.report(groups[value], reference)
        rows.append({key: value, **rep.as_dict()})
    return rows


def cmd_evaluate(cfg: dict) -> int:
    _require(cfg, "generated", "reference", "out")
    generated = load_pool(cfg["generated"])
    reference = load_pool(cfg["reference"])
    overall = metrics.report(generated, reference)
    doc = {
        "schema_version": SCHEMA_VERSION,
        "overall": overall.as_dict(),
        "per_t_end": _grouped_reports(generated, reference, "t_end"),
        "per_label": _grouped_reports(generated, reference, "label"),
    }
    with open(cfg["out"], "w") as fh:
        json.dump(doc, fh, indent=2, sort_keys=True)
        fh.write("\n")
    print(overall.format_table())
    for row in doc["per_t_end"]:
        print(f"t_end={row['t_end']}: median minSTTC "
              f"{row['median_minsttc']:.3f}, near-miss "
              f"{row['near_miss_rate']:.3f}")
    _write_manifest(cfg["out"] + ".manifest.json", "evaluate", cfg,
                    {"generated": cfg["generated"],
                     "reference": cfg["reference"]},
                    {"report": cfg["out"]})
    return 0


# --------------------------------------------------------------- rendering

def render_svg(s: Scenario, n_snapshots: int = 6, scale: float = 6.0) -> str:
    """Deterministic top-down vector plot: lane polylines, actor boxes at
    sampled timesteps with fading alpha, ego highlighted."""
    future = s.future if s.future.size else np.zeros((0,) + s.history.shape[1:])
    states = np.concatenate([s.history, future], axis=0)
    steps = states.shape[0]
    count = max(1, min(n_snapshots, steps))
    snap_idx = sorted(set(np.linspace(0, steps - 1, count).round().astype(int)))

    # viewBox hugs the actors; lane polylines may overflow and get clipped
    allpts = np.concatenate([states[t, :, :2] for t in snap_idx], axis=0)
    margin = 15.0
    min_x, min_y = allpts.min(axis=0) - margin
    max_x, max_y = allpts.max(axis=0) + margin
    width = (max_x - min_x) * scale
    height = (max_y - min_y) * scale

    def sx(x: float) -> str:
        return f"{(x - min_x) * scale:.2f}"

    def sy(y: float) -> str:
        return f"{(max_y - y) * scale:.2f}"

    out = [
        f'<svg xmlns="http://www.w3.org/2000/svg" width="{width:.0f}" '
        f'height="{height:.0f}" viewBox="0 0 {width:.2f} {height:.2f}">',
        f'<rect width="100%" height="100%" fill="#ffffff"/>',
    ]
    graph = s.lane_graph
    for lane in graph.lane_id_list():
        nodes = graph.lane_nodes(lane)
        coords = " ".join(f"{sx(graph.positions[k, 0])},"
                          f"{sy(graph.positions[k, 1])}" for k in nodes)
        out.append(f'<polyline points="{coords}" fill="none" '
                   f'stroke="#b9c2cc" stroke-width="1.5"/>')
    ego = s.ego_index
    for rank, t in enumerate(snap_idx):
        alpha = 1.0 if len(snap_idx) == 1 else 0.25 + 0.75 * rank / (len(snap_idx) - 1)
        for i in range(s.n_actors):
            corners = geom.box_corners(*geom.state_box(states[t, i]))
            coords = " ".join(f"{sx(cx)},{sy(cy)}" for cx, cy in corners)
            color = "#c43c3c" if i == ego else "#3a6fc4"
            out.append(f'<polygon points="{coords}" fill="{color}" '
                       f'fill-opacity="{alpha:.2f}" stroke="{color}" '
                       f'stroke-width="0.5"/>')
    out.append(f'<text x="10" y="16" font-family="monospace" '
               f'font-size="12" fill="#222">actors: {s.n_actors} | '
               f'{s.scenario_id}</text>')
    out.append("</svg>")
    return "\n".join(out) + "\n"


def cmd_render(cfg: dict) -> int:
    _require(cfg, "scenarios", "out")
    pool = load_pool(cfg["scenarios"])
    if not pool:
        raise DataError(f"no scenarios in {cfg['scenarios']}")
    if cfg["scenario_id"] is not None:
        matches = [s for s in pool if s.scenario_id == cfg["scenario_id"]]
        if not matches:
            raise DataError(f"scenario id {cfg['scenario_id']!r} not found "
                            f"in {cfg['scenarios']}")
        scenario = matches[0]
    else:
        if not 0 <= cfg["index"] < len(pool):
            raise DataError(f"scenario index {cfg['index']} out of range "
                            f"(pool holds {len(pool)})")
        scenario = pool[cfg["index"]]
    svg = render_svg(scenario, n_snapshots=cfg["snapshots"],
                     scale=cfg["scale"])
    with open(cfg["out"], "w") as fh:
        fh.write(svg)
    print(f"rendered {scenario.scenario_id} to {cfg['out']}")
    _write_manifest(cfg["out"] + ".manifest.json", "render", cfg,
                    {"scenarios": cfg["scenarios"]}, {"figure": cfg["out"]})
    return 0


# ------------------------------------------------------------------ parser

class _Parser(argparse.ArgumentParser):
    # usage problems are configuration errors (exit 1), not argparse's 2
    def error(self, message):
        raise ConfigError(message)


def _build_parser() -> argparse.ArgumentParser:
    parser = _Parser(prog="flowscene",
                     description="Safety-critical scenario generation "
                                 "pipeline")
    sub = parser.add_subparsers(dest="command", required=True)

    def add(name: str, help_text: str):
        p = sub.add_parser(name, help=help_text)
        p.add_argument("--config", help="JSON config file (section per "
                                        "command; flags win)")
        return p

    p = add("synth", "generate scenario pools")
    p.add_argument("--out-dir")
    p.add_argument("--map", choices=("highway", "urban"))
    p.add_argument("--n-nominal", type=int)
    p.add_argument("--n-critical", type=int)
    p.add_argument("--n-real", type=int)
    p.add_argument("--n-actors", type=int)
    p.add_argument("--seed", type=int)
    p.add_argument("--n-workers", type=int)
    p.add_argument("--ttc-very", type=float)
    p.add_argument("--ttc-safety", type=float)
    p.add_argument("--decel-very", type=float)
    p.add_argument("--decel-safety", type=float)

    p = add("train-vae", "stage 1: train the conditional VAE")
    p.add_argument("--pools", nargs="+")
    p.add_argument("--checkpoint")
    p.add_argument("--log-path")
    p.add_argument("--steps", type=int)
    p.add_argument("--lr", type=float)
    p.add_argument("--seed", type=int)
    p.add_argument("--d-z", type=int)
    p.add_argument("--d-model", type=int)
    p.add_argument("--n-heads", type=int)
    p.add_argument("--n-blocks", type=int)
    p.add_argument("--beta", type=float)

    p = add("train-flow", "stage 2: train the latent flow")
    p.add_argument("--vae-checkpoint")
    p.add_argument("--sim-pool")
    p.add_argument("--real-pool")
    p.add_argument("--alpha-real", type=float)
    p.add_argument("--upsample-real", type=int)
    p.add_argument("--checkpoint")
    p.add_argument("--log-path")
    p.add_argument("--steps", type=int)
    p.add_argument("--lr", type=float)
    p.add_argument("--seed", type=int)
    p.add_argument("--n-heads", type=int)
    p.add_argument("--n-blocks", type=int)
    p.add_argument("--n-sample-steps", type=int)
    p.add_argument("--conditioning", action=argparse.BooleanOptionalAction,
                   default=None)

    p = add("generate", "sample rollouts from the trained pipeline")
    p.add_argument("--vae-checkpoint")
    p.add_argument("--flow-checkpoint")
    p.add_argument("--scenarios")
    p.add_argument("--out")
    p.add_argument("--label", choices=sorted(LABEL_NAMES))
    p.add_argument("--t-end", dest="t_end_grid", nargs="+", type=float)
    p.add_argument("--seed", type=int)
    p.add_argument("--n-workers", type=int)
    p.add_argument("--limit", type=int)
    p.add_argument("--n-sample-steps", type=int)

    p = add("evaluate", "score rollouts against a reference pool")
    p.add_argument("--generated")
    p.add_argument("--reference")
    p.add_argument("--out")

    p = add("render", "render one scenario to a vector figure")
    p.add_argument("--scenarios")
    p.add_argument("--out")
    p.add_argument("--index", type=int)
    p.add_argument("--scenario-id")
    p.add_argument("--snapshots", type=int)
    p.add_argument("--scale", type=float)

    return parser


HANDLERS = {
    "synth": cmd_synth,
    "train-vae": cmd_train_vae,
    "train-flow": cmd_train_flow,
    "generate": cmd_generate,
    "evaluate": cmd_evaluate,
    "render": cmd_render,
}


def _init_logging():
    level = {"debug": logging.DEBUG, "info": logging.INFO,
             "warning": logging.WARNING, "quiet": logging.ERROR}
    name = os.environ.get("FLOWSCENE_LOG", "warning").lower()
    logging.basicConfig(level=level.get(name, logging.WARNING),
                        format="%(levelname)s %(name)s: %(message)s")


def main(argv: Sequence[str] | None = None) -> int:
    _init_logging()
    try:
        args = _build_parser().parse_args(argv)
        cfg = _resolve(args.command, args)
        return HANDLERS[args.command](cfg)
    except ConfigError as e:
        print(f"error: {e}", file=sys.stderr)
        return 1
    except DataError as e:
        print(f"error: {e}", file=sys.stderr)
        return 2
    except NumericalError as e:
        print(f"error: {e}", file=sys.stderr)
        return 3
    except FlowsceneError as e:
        print(f"error: {e}", file=sys.stderr)
        return 1
    except OSError as e:
        print(f"error: {e}", file=sys.stderr)
        return 1


if __name__ == "__main__":
    sys.exit(main())
