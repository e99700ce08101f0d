"""Config-driven experiment runner.

Subcommands: train, attack, ablate, tradeoff, audit, gen-data. Every command
is deterministic given its config and seed, writes only inside the output
directory, and emits schema-stable CSV/JSONL files (columns documented in the
README). Exit codes: 0 success, 1 config error, 2 runtime error. Set
ST_GIA_LOG to error, info, or debug to control logging.
"""

from __future__ import annotations

import argparse
import csv
import itertools
import logging
import math
import os
import sys
import tempfile
from dataclasses import replace
from pathlib import Path

import numpy as np

from . import attack as atk
from . import config as cfgmod
from . import dataio, defense, fedsim, geo, model
from .errors import ConfigurationError, InputError, StgiaError

log = logging.getLogger("stgia.cli")

TRADEOFF_MECHANISMS = ("dpsgd", "geoi", "geogi", "pgem_adaptive")
DEFAULT_TRADEOFF_EPSILONS = (1.0, 5.0, 10.0, 20.0, 50.0)
GEO_EPS_REFERENCE_M = 500.0  # reference radius turning a bare epsilon into per-meter


def _setup_logging() -> None:
    level = os.environ.get("ST_GIA_LOG", "error").lower()
    levels = {"error": logging.ERROR, "info": logging.INFO, "debug": logging.DEBUG}
    if level not in levels:
        raise ConfigurationError(f"ST_GIA_LOG must be error, info or debug, not {level!r}")
    logging.basicConfig(level=levels[level], format="%(levelname)s %(name)s: %(message)s")


def _atomic_write(path: Path, writer) -> None:
    """Write via temp file + rename so partial outputs never appear."""
    path.parent.mkdir(parents=True, exist_ok=True)
    fd, tmp = tempfile.mkstemp(dir=path.parent, prefix=path.name + ".", suffix=".tmp")
    try:
        with os.fdopen(fd, "w", encoding="utf-8", newline="") as fh:
            writer(fh)
        os.replace(tmp, path)
    except BaseException:
        if os.path.exists(tmp):
            os.unlink(tmp)
        raise


def _write_csv(path: Path, header: list[str], rows: list[list]) -> None:
    def write(fh):
        w = csv.writer(fh)
        w.writerow(header)
        for row in rows:
            w.writerow(row)

    _atomic_write(path, write)


def _fmt(value) -> str:
    if value is None:
        return ""
    if isinstance(value, float):
        return repr(value)
    return str(value)


def _load(args) -> cfgmod.ExperimentConfig:
    if not args.config:
        raise ConfigurationError("--config PATH is required")
    cfg = cfgmod.load_config(args.config)
    if args.seed is not None:
        cfg.seed = args.seed
        cfg.attack = replace(cfg.attack, seed=args.seed)
    if args.out is not None:
        cfg.out_dir = args.out
    return cfg


def _train_once(cfg, net, spec, plan, seed, check_holdout=True):
    clients = _clients_for_seed(cfg, net, seed)
    if check_holdout:
        # only commands that report held-out recall need untrained windows
        overlap = fedsim.first_trained_holdout_overlap(
            clients, spec, cfg.training.rounds, cfg.training.holdout_frac
        )
        if overlap is not None:
            raise ConfigurationError(
                f"training.rounds={cfg.training.rounds} would train on held-out windows "
                f"(first overlap at round {overlap}); extend data.length or lower rounds"
            )
    return clients, fedsim.run_training(
        clients, spec, net, cfg.training.rounds, plan, seed, network_ref=_network_ref(cfg)
    )


def _clients_for_seed(cfg, net, seed):
    saved = cfg.seed
    cfg.seed = seed
    try:
        return cfgmod.build_clients(cfg, net)
    finally:
        cfg.seed = saved


def _network_ref(cfg) -> str:
    if cfg.network.kind == "grid":
        return f"grid:{cfg.network.rows}x{cfg.network.cols}@{cfg.network.spacing_m}"
    return str(cfg.network.path)


def _recall_series(transcript, clients, spec, net, cfg):
    """recall@5 of the global model after each round, on held-out windows."""
    grid = model.CellGrid.from_bbox(net.bounding_box(), spec.num_cells)
    recalls = []
    params = None
    for rnd in transcript.rounds:
        updates = [
            rnd.global_params_before - c.eta_local * e.shared_gradient
            for c, e in zip(sorted(clients, key=lambda c: c.client_id), rnd.entries)
        ]
        params = fedsim.fedavg_aggregate(updates, [1.0] * len(updates))
        recalls.append(
            fedsim.evaluate_recall(params, clients, spec, grid, 5, cfg.training.holdout_frac)
        )
    return recalls, params


def cmd_train(args) -> int:
    cfg = _load(args)
    out = Path(cfg.out_dir)
    net = cfgmod.build_network(cfg)
    spec = cfgmod.resolve_model_spec(cfg, net)
    plan = cfg.defense.to_plan()
    clients, transcript = _train_once(cfg, net, spec, plan, cfg.seed)
    out.mkdir(parents=True, exist_ok=True)
    _atomic_write(out / "transcript.jsonl", lambda fh: fedsim.dump_transcript(transcript, fh))
    recalls, _ = _recall_series(transcript, clients, spec, net, cfg)
    rows = []
    for rnd, recall in zip(transcript.rounds, recalls):
        eps = rnd.entries[0].epsilon_used if rnd.entries else None
        rows.append([rnd.round_t, _fmt(recall), _fmt(eps)])
    _write_csv(out / "metrics.csv", ["round", "recall5", "epsilon_t"], rows)
    log.info("wrote %s and %s", out / "transcript.jsonl", out / "metrics.csv")
    return 0


def cmd_attack(args) -> int:
    cfg = _load(args)
    out = Path(cfg.out_dir)
    net = cfgmod.build_network(cfg)
    spec = cfgmod.resolve_model_spec(cfg, net)
    transcript_path = args.transcript or str(Path(cfg.out_dir) / "transcript.jsonl")
    transcript = fedsim.read_transcript(transcript_path)
    if transcript.spec != spec:
        raise ConfigurationError(
            f"transcript spec {transcript.spec} does not match the config's model {spec}"
        )
    view = atk.AttackerView.from_transcript(transcript)
    logrec, report = atk.run_attack(
        view, net, cfg.attack, fedsim.truth_inputs_map(transcript), threads=args.threads
    )
    out.mkdir(parents=True, exist_ok=True)
    _write_csv(
        out / "attack_summary.csv",
        ["round", "asr", "mean_ait"],
        [[rm.round_t, _fmt(rm.asr), _fmt(rm.mean_ait)] for rm in report.per_round],
    )
    rows = []
    for (client, point), recs in sorted(logrec.entries.items()):
        for r in recs:
            err = math.inf if r.error_m is None else r.error_m
            rows.append(
                [r.round_t, client, point, _fmt(err), r.iterations,
                 int(err < cfg.attack.success_threshold_m)]
            )
    rows.sort(key=lambda row: (row[0], row[1], row[2]))
    _write_csv(
        out / "attack_points.csv",
        ["round", "client_id", "point_index", "error_m", "iterations", "success"],
        rows,
    )
    _write_csv(
        out / "attack_calibrated.csv",
        ["client_id", "point_index", "error_m", "success"],
        [
            [p.client_id, p.point_index, _fmt(p.error_m), int(p.error_m < report.threshold_m)]
            for p in report.points
        ],
    )
    _atomic_write(out / "reconstruction_log.jsonl", logrec.dump)
    log.info("attack reports written under %s (overall ASR %.3f)", out, report.overall_asr)
    return 0


def cmd_ablate(args) -> int:
    cfg = _load(args)
    out = Path(cfg.out_dir)
    net = cfgmod.build_network(cfg)
    spec = cfgmod.resolve_model_spec(cfg, net)
    plan = cfg.defense.to_plan()
    clients, transcript = _train_once(cfg, net, spec, plan, cfg.seed, check_holdout=False)
    view = atk.AttackerView.from_transcript(transcript)
    truth = fedsim.truth_inputs_map(transcript)
    rows = []
    for st_init, mapping, calibration in itertools.product((False, True), repeat=3):
        acfg = replace(cfg.attack, st_init=st_init, mapping=mapping, calibration=calibration)
        _, report = atk.run_attack(view, net, acfg, truth, threads=args.threads)
        for rm in report.per_round:
            rows.append(
                [int(st_init), int(mapping), int(calibration), rm.round_t,
                 _fmt(rm.asr), _fmt(rm.mean_ait), _fmt(report.overall_asr)]
            )
    out.mkdir(parents=True, exist_ok=True)
    _write_csv(
        out / "ablation.csv",
        ["st_init", "mapping", "calibration", "round", "asr", "mean_ait", "overall_asr"],
        rows,
    )
    log.info("wrote %s", out / "ablation.csv")
    return 0


def tradeoff_plan(mechanism: str, eps: float, base: cfgmod.DefenseConfig,
                  risk_profile) -> defense.DefensePlan:
    """Interpret a bare epsilon for each mechanism family.

    dpsgd: Gaussian-mechanism noise for a per-round epsilon. geoi/geogi: a
    per-use epsilon spread over the reference radius. pgem_adaptive: the total
    budget of the adaptive allocator, fed by the undefended risk profile.
    """
    if mechanism == "dpsgd":
        return defense.DefensePlan(
            mechanism="dpsgd",
            clip_norm=base.clip_norm,
            noise_multiplier=cfgmod.dpsgd_sigma_for_epsilon(eps),
        )
    if mechanism in ("geoi", "geogi"):
        return defense.DefensePlan(mechanism=mechanism, eps_per_meter=eps / GEO_EPS_REFERENCE_M)
    if mechanism == "pgem_adaptive":
        return defense.DefensePlan(
            mechanism="pgem_adaptive",
            total_epsilon=eps,
            importance=defense.ImportanceParams(
                base.asr_weight, base.ait_weight, base.ait_reference, base.gamma_cap
            ),
            risk=defense.RiskSource(mode="profile", profile=risk_profile),
            clamp_allocation=base.clamp_allocation,
            p_min=base.p_min,
            p_max=base.p_max,
        )
    raise ConfigurationError(f"unknown tradeoff mechanism {mechanism!r}")


def cmd_tradeoff(args) -> int:
    cfg = _load(args)
    out = Path(cfg.out_dir)
    net = cfgmod.build_network(cfg)
    spec = cfgmod.resolve_model_spec(cfg, net)
    mechanisms = args.mechanisms.split(",") if args.mechanisms else list(TRADEOFF_MECHANISMS)
    for m in mechanisms:
        if m not in TRADEOFF_MECHANISMS:
            raise ConfigurationError(f"unknown mechanism {m!r} in --mechanisms")
    epsilons = (
        [float(e) for e in args.epsilons.split(",")] if args.epsilons
        else list(DEFAULT_TRADEOFF_EPSILONS)
    )
    seeds = [cfg.seed + i for i in range(args.seeds)]

    profiles: dict[int, defense.RiskProfile] = {}

    def profile_for(seed: int) -> defense.RiskProfile:
        if seed not in profiles:
            clients, transcript = _train_once(cfg, net, spec, None, seed)
            view = atk.AttackerView.from_transcript(transcript)
            acfg = replace(cfg.attack, seed=seed)
            _, rep = atk.run_attack(
                view, net, acfg, fedsim.truth_inputs_map(transcript), threads=args.threads
            )
            profiles[seed] = defense.RiskProfile.from_attack_report(rep)
        return profiles[seed]

    rows = []
    for mechanism in mechanisms:
        for eps in epsilons:
            asrs, recalls = [], []
            for seed in seeds:
                risk = profile_for(seed) if mechanism == "pgem_adaptive" else None
                plan = tradeoff_plan(mechanism, eps, cfg.defense, risk)
                clients, transcript = _train_once(cfg, net, spec, plan, seed)
                view = atk.AttackerView.from_transcript(transcript)
                acfg = replace(cfg.attack, seed=seed)
                _, rep = atk.run_attack(
                    view, net, acfg, fedsim.truth_inputs_map(transcript), threads=args.threads
                )
                recall_series, _ = _recall_series(transcript, clients, spec, net, cfg)
                asrs.append(rep.overall_asr)
                recalls.append(recall_series[-1])
            rows.append([mechanism, _fmt(eps), _fmt(float(np.mean(asrs))), _fmt(float(np.mean(recalls)))])
    out.mkdir(parents=True, exist_ok=True)
    _write_csv(out / "tradeoff.csv", ["mechanism", "epsilon", "asr", "recall5"], rows)
    log.info("wrote %s", out / "tradeoff.csv")
    return 0


def cmd_audit(args) -> int:
    out = Path(args.out or "results")
    epsilons = [float(e) for e in (args.epsilons or "0.5,1,2").split(",")]
    mechanisms = (args.mechanisms or "pgem,geogi").split(",")
    for m in mechanisms:
        if m not in ("pgem", "geogi"):
            raise ConfigurationError(f"auditable mechanisms are pgem and geogi, not {m!r}")
    seed0 = args.seed if args.seed is not None else 0
    max_nodes = args.domain_size
    if max_nodes < 2 or max_nodes > 25:
        raise ConfigurationError("--domain-size must be between 2 and 25 (exact enumeration)")
    rows = []
    for mechanism in mechanisms:
        for eps in epsilons:
            for i in range(args.domains):
                seed = seed0 + i
                rng = np.random.default_rng(np.random.SeedSequence([seed, 9]))
                n = int(rng.integers(4, max_nodes + 1))
                net = geo.random_connected_network(n, rng)
                domain = _random_domain(net, rng)
                excess = defense.audit_ratio_bound(mechanism, net, domain, eps)
                size = len(domain.node_ids) if mechanism == "pgem" else net.num_nodes
                rows.append([mechanism, _fmt(eps), seed, size, _fmt(excess)])
    out.mkdir(parents=True, exist_ok=True)
    _write_csv(
        out / "audit.csv", ["mechanism", "epsilon", "seed", "domain_size", "max_excess"], rows
    )
    log.info("wrote %s", out / "audit.csv")
    return 0


def _random_domain(net: geo.RoadNetwork, rng: np.random.Generator) -> geo.ConstrainedDomain:
    """A metric ball around a random node: connected by construction."""
    center = int(rng.integers(0, net.num_nodes))
    dist = geo.shortest_path_distances(net, center)
    finite = np.flatnonzero(np.isfinite(dist))
    radius = float(rng.uniform(0.3, 1.0)) * float(dist[finite].max() or 1.0)
    members = frozenset(int(i) for i in finite if dist[i] <= radius) | {center}
    return geo.ConstrainedDomain(members)


def cmd_gen_data(args) -> int:
    cfg = _load(args)
    out = Path(cfg.out_dir)
    net = cfgmod.build_network(cfg)
    if cfg.data.kind != "synthetic":
        raise ConfigurationError("gen-data needs data.kind == 'synthetic'")
    trajectories = dataio.synthesize_trajectories(
        net, cfg.data.n_users, cfg.data.length, cfg.seed,
        cfg.data.step_budget_m, cfg.data.interval_s,
    )
    out.mkdir(parents=True, exist_ok=True)
    _atomic_write(out / "network.json", lambda fh: geo.dump_network(net, fh))
    _atomic_write(out / "trajectories.jsonl", lambda fh: dataio.dump_trajectories(trajectories, fh))
    proj = geo.ProjectionSpec(cfg.data.origin_lat, cfg.data.origin_lon)
    _atomic_write(out / "checkins.csv", lambda fh: _dump_checkins(trajectories, proj, fh))
    log.info("generated %d trajectories on %d nodes", len(trajectories), net.num_nodes)
    return 0


def _dump_checkins(trajectories, proj, fh) -> None:
    from datetime import datetime, timezone

    w = csv.writer(fh)
    w.writerow(["user_id", "timestamp", "lat", "lon"])
    base = datetime(2020, 1, 1, tzinfo=timezone.utc).timestamp()
    for tr in trajectories:
        for t, (x, y) in zip(tr.times, tr.points):
            lat, lon = geo.to_latlon(geo.Location(float(x), float(y)), proj)
            stamp = datetime.fromtimestamp(base + float(t), tz=timezone.utc)
            w.writerow([tr.user_id, stamp.strftime("%Y-%m-%dT%H:%M:%SZ"), repr(lat), repr(lon)])


def build_parser() -> argparse.ArgumentParser:
    parser = argparse.ArgumentParser(
        prog="stgia",
        description="Gradient inversion attacks and adaptive location-privacy defenses, desk scale.",
    )
    sub = parser.add_subparsers(dest="command", required=True)

    def common(p):
        p.add_argument("--config", help="experiment config JSON")
        p.add_argument("--out", help="output directory (overrides config out_dir)")
        p.add_argument("--seed", type=int, help="seed override")
        p.add_argument("--threads", type=int, default=1, help="parallel clients for attacks")

    p = sub.add_parser("train", help="run federated training, write transcript + metrics")
    common(p)
    p = sub.add_parser("attack", help="reconstruct locations from a transcript")
    common(p)
    p.add_argument("--transcript", help="transcript path (default: <out_dir>/transcript.jsonl)")
    p = sub.add_parser("ablate", help="attack with all 8 ablation flag combinations")
    common(p)
    p = sub.add_parser("tradeoff", help="defended train + attack over mechanisms x epsilons")
    common(p)
    p.add_argument("--mechanisms", help=f"comma list from {TRADEOFF_MECHANISMS}")
    p.add_argument("--epsilons", help="comma list of epsilon values")
    p.add_argument("--seeds", type=int, default=1, help="average over this many seeds")
    p = sub.add_parser("audit", help="exact ratio-bound audit of the graph mechanisms")
    common(p)
    p.add_argument("--mechanisms", help="comma list from pgem,geogi")
    p.add_argument("--epsilons", help="comma list of epsilon values (default 0.5,1,2)")
    p.add_argument("--domains", type=int, default=20, help="random domains per epsilon")
    p.add_argument("--domain-size", dest="domain_size", type=int, default=25,
                   help="max nodes per random domain (<= 25)")
    p = sub.add_parser("gen-data", help="write synthetic network, trajectories and check-ins")
    common(p)
    return parser


_COMMANDS = {
    "train": cmd_train,
    "attack": cmd_attack,
    "ablate": cmd_ablate,
    "tradeoff": cmd_tradeoff,
    "audit": cmd_audit,
    "gen-data": cmd_gen_data,
}


def main(argv=None) -> int:
    try:
        _setup_logging()
        args = build_parser().parse_args(argv)
        return _COMMANDS[args.command](args)
    except (ConfigurationError, InputError) as exc:
        print(f"config error: {exc}", file=sys.stderr)
        return 1
    except StgiaError as exc:
        print(f"runtime error: {exc}", file=sys.stderr)
        return 2


if __name__ == "__main__":
    sys.exit(main())
