"""Federated protocol simulation: local SGD, FedAvg, and the shared-gradient
transcript that forms the attack surface.

Round t trains every client on the sliding window starting at trajectory
index t (k inputs, label = grid cell of the next point), so each trajectory
point is trained, and hence reconstructable, up to k times. Clients share raw
gradients; the server aggregates the one-step updates with unit weights.
Everything is driven by per-(client, round) RNG streams derived from the run
seed, so parallel and serial schedules produce identical transcripts.
"""

from __future__ import annotations

import base64
import json
import math
from dataclasses import dataclass, field

import numpy as np

from .attack import AttackConfig, gradient_match, initialize_dummy
from .dataio import Trajectory
from .defense import (
    DefensePlan,
    FullNetworkExponentialMechanism,
    GraphExponentialMechanism,
    PrivacyBudget,
    RiskProfile,
    adaptive_defense_round,
    dpsgd_perturb,
    geoi_sample,
)
from .errors import BudgetExhausted, ConfigurationError, InputError, NumericError
from .geo import ConstrainedDomain, RoadNetwork
from .model import (
    CellGrid,
    ModelSpec,
    TrainingWindow,
    init_params,
    param_gradient,
    predict_ranking,
    recall_at_k,
)

_SEED_TAG_INIT = 1
_SEED_TAG_DEFENSE = 4
_SEED_TAG_SHADOW = 5


@dataclass(frozen=True)
class ClientState:
    """One simulated client: its trajectory and local training setup."""

    client_id: int
    trajectory: Trajectory
    eta_local: float = 0.5
    constrained_domain: ConstrainedDomain | None = None

    def __post_init__(self):
        if not self.eta_local >= 0:
            raise InputError("eta_local must be nonnegative")


@dataclass
class ClientRoundEntry:
    client_id: int
    shared_gradient: np.ndarray
    truth_window: TrainingWindow  # evaluation only; never shown to the attacker role
    defended: bool
    epsilon_used: float | None


@dataclass
class RoundRecord:
    round_t: int
    global_params_before: np.ndarray
    entries: list[ClientRoundEntry]


@dataclass
class Transcript:
    spec: ModelSpec
    seed: int
    num_rounds: int
    network_ref: str | None
    rounds: list[RoundRecord] = field(default_factory=list)


def local_update(
    spec: ModelSpec, global_params: np.ndarray, window: TrainingWindow, eta_local: float
) -> tuple[np.ndarray, np.ndarray]:
    """One SGD step: returns (new_params, gradient)."""
    grad = param_gradient(spec, global_params, window)
    new_params = np.asarray(global_params, dtype=np.float64) - eta_local * grad
    return new_params, grad


def fedavg_aggregate(updates: list[np.ndarray], weights: list[float]) -> np.ndarray:
    """Weighted componentwise average of parameter vectors."""
    if not updates:
        raise InputError("nothing to aggregate")
    if len(updates) != len(weights):
        raise InputError(f"{len(updates)} updates vs {len(weights)} weights")
    if any(w < 0 for w in weights):
        raise InputError("weights must be nonnegative")
    total = float(sum(weights))
    if not total > 0:
        raise InputError("weights must sum to a positive value")
    first = np.asarray(updates[0], dtype=np.float64)
    acc = np.zeros_like(first)
    for u, w in zip(updates, weights):
        u = np.asarray(u, dtype=np.float64)
        if u.shape != first.shape:
            raise InputError("updates must all have the same length")
        acc += w * u
    return acc / total


def training_window(
    client: ClientState, spec: ModelSpec, grid: CellGrid, round_t: int
) -> tuple[np.ndarray, int]:
    """The (k+1) trajectory points of round t: k inputs plus the label point."""
    k = spec.window_len
    start = round_t - 1
    pts = client.trajectory.points[start : start + k + 1]
    if pts.shape[0] != k + 1:
        raise ConfigurationError(
            f"client {client.client_id} trajectory too short for round {round_t}"
        )
    return np.array(pts, dtype=np.float64), grid.cell_index(pts[k, 0], pts[k, 1])


class _DefenseState:
    """Per-run defense machinery: samplers, budgets, and the risk feed."""

    def __init__(self, plan: DefensePlan, clients, spec, net, grid, num_rounds, seed):
        self.plan = plan
        self.spec = spec
        self.net = net
        self.grid = grid
        self.seed = seed
        self.num_rounds = num_rounds
        self.budgets: dict[int, PrivacyBudget] = {}
        self.pgem: dict[int, GraphExponentialMechanism] = {}
        self.geogi: FullNetworkExponentialMechanism | None = None
        self.risk: RiskProfile | None = None
        if plan.mechanism == "pgem_adaptive":
            for c in clients:
                if c.constrained_domain is None:
                    raise ConfigurationError(
                        f"client {c.client_id} has no constrained domain for pgem_adaptive"
                    )
                self.budgets[c.client_id] = PrivacyBudget(plan.total_epsilon)
                self.pgem[c.client_id] = GraphExponentialMechanism(net, c.constrained_domain)
            if plan.risk.mode == "profile":
                prof = plan.risk.profile
                missing = [t for t in range(1, num_rounds + 1) if not prof.has_round(t)]
                if missing:
                    raise ConfigurationError(
                        f"risk profile missing rounds {missing[:5]} (profile mode needs 1..T)"
                    )
                self.risk = prof
            else:
                self.risk = RiskProfile()
                self.risk.set_round(1, 0.0, None)  # nothing measured before round 1
        elif plan.mechanism == "geogi":
            self.geogi = FullNetworkExponentialMechanism(net, plan.eps_per_meter)

    def perturb_window(self, client: ClientState, round_t: int, pts: np.ndarray):
        """Apply the plan's location mechanism to all window points.

        Returns (perturbed points, epsilon_used, defended). DP-SGD leaves the
        window alone and acts on the gradient instead.
        """
        plan = self.plan
        if plan.mechanism in ("none", "dpsgd"):
            return pts, None, plan.mechanism == "dpsgd"
        rng = np.random.default_rng(
            np.random.SeedSequence([self.seed, _SEED_TAG_DEFENSE, client.client_id, round_t])
        )
        if plan.mechanism == "geoi":
            out = np.stack([geoi_sample(p, plan.eps_per_meter, rng) for p in pts])
            return out, plan.eps_per_meter, True
        if plan.mechanism == "geogi":
            out = np.empty_like(pts)
            for i, (x, y) in enumerate(pts):
                node = _nearest_net_node(self.net, x, y)
                out[i] = self.net.node_xy[self.geogi.sample(node, rng)]
            return out, plan.eps_per_meter, True
        # pgem_adaptive
        budget = self.budgets[client.client_id]
        mech = self.pgem[client.client_id]
        try:
            out, eps_t = adaptive_defense_round(
                budget,
                self.risk,
                round_t,
                pts,
                client.constrained_domain,
                self.net,
                plan.importance,
                rng,
                mechanism=mech,
                clamp=plan.clamp_allocation,
                p_min=plan.p_min,
                p_max=plan.p_max,
                eps_floor=plan.eps_floor,
            )
            return out, eps_t, True
        except BudgetExhausted:
            # Nothing left to spend: sample uniformly over the domain, which
            # costs no budget and keeps the client participating.
            out = np.empty_like(pts)
            for i in range(pts.shape[0]):
                node = mech.nodes[0]
                out[i] = self.net.node_xy[mech.sample(node, 0.0, rng)]
            return out, 0.0, True

    def perturb_gradient(self, client_id: int, round_t: int, grad: np.ndarray) -> np.ndarray:
        if self.plan.mechanism != "dpsgd":
            return grad
        rng = np.random.default_rng(
            np.random.SeedSequence([self.seed, _SEED_TAG_DEFENSE, client_id, round_t])
        )
        return dpsgd_perturb(grad, self.plan.clip_norm, self.plan.noise_multiplier, rng)

    def observe_round(self, record: RoundRecord) -> None:
        """Shadow mode: attack this round's own gradients to score the next one."""
        if self.plan.mechanism != "pgem_adaptive" or self.plan.risk.mode != "shadow":
            return
        t = record.round_t
        if t + 1 > self.num_rounds:
            return
        cfg = self.plan.risk.shadow_attack or AttackConfig(
            max_iters=60, attack_rate=1.0, seed=self.seed
        )
        errors = []
        iters_success = []
        for entry in record.entries:
            rng = np.random.default_rng(
                np.random.SeedSequence([self.seed, _SEED_TAG_SHADOW, entry.client_id, t])
            )
            init = initialize_dummy(1, None, self.spec, rng, warm_start=False)
            try:
                result = gradient_match(
                    self.spec,
                    record.global_params_before,
                    entry.shared_gradient,
                    init,
                    self.net,
                    cfg,
                )
            except NumericError:
                errors.extend([math.inf] * self.spec.window_len)
                continue
            truth = entry.truth_window.inputs
            errs = np.sqrt(((result.dummy.inputs - truth) ** 2).sum(axis=1))
            errors.extend(float(e) for e in errs)
            for e in errs:
                if e < cfg.success_threshold_m:
                    iters_success.append(result.iterations)
        asr = float(np.mean([e < cfg.success_threshold_m for e in errors])) if errors else 0.0
        ait = float(np.mean(iters_success)) if iters_success else None
        self.risk.set_round(t + 1, asr, ait)


def _nearest_net_node(net: RoadNetwork, x: float, y: float) -> int:
    d2 = (net.node_xy[:, 0] - x) ** 2 + (net.node_xy[:, 1] - y) ** 2
    return int(np.argmin(d2))


def run_training(
    clients: list[ClientState],
    spec: ModelSpec,
    net: RoadNetwork,
    num_rounds: int,
    defense: DefensePlan | None = None,
    seed: int = 0,
    network_ref: str | None = None,
) -> Transcript:
    """Run the federated protocol for num_rounds and record everything.

    Per round: each client (optionally defended) trains one SGD step on its
    sliding window and shares the gradient; the server averages the one-step
    updates with unit weights. Deterministic given all arguments.
    """
    if not clients:
        raise InputError("need at least one client")
    if num_rounds < 1:
        raise InputError("num_rounds must be >= 1")
    ids = [c.client_id for c in clients]
    if len(set(ids)) != len(ids):
        raise ConfigurationError("duplicate client ids")
    k = spec.window_len
    for c in clients:
        if len(c.trajectory) < num_rounds + k:
            raise ConfigurationError(
                f"client {c.client_id} has {len(c.trajectory)} points; "
                f"needs at least {num_rounds + k} for {num_rounds} rounds"
            )
    plan = defense or DefensePlan(mechanism="none")
    grid = CellGrid.from_bbox(net.bounding_box(), spec.num_cells)
    state = _DefenseState(plan, clients, spec, net, grid, num_rounds, seed)
    ordered = sorted(clients, key=lambda c: c.client_id)

    params = init_params(
        spec, np.random.default_rng(np.random.SeedSequence([seed, _SEED_TAG_INIT]))
    )
    transcript = Transcript(spec, seed, num_rounds, network_ref)
    for t in range(1, num_rounds + 1):
        record = RoundRecord(t, params.copy(), [])
        updates = []
        for client in ordered:
            pts, _ = training_window(client, spec, grid, t)
            truth_window = TrainingWindow(pts[:k].copy(), grid.cell_index(pts[k, 0], pts[k, 1]))
            used_pts, eps_used, defended = state.perturb_window(client, t, pts)
            train_window = TrainingWindow(
                used_pts[:k], grid.cell_index(used_pts[k, 0], used_pts[k, 1])
            )
            grad = param_gradient(spec, params, train_window)
            shared = state.perturb_gradient(client.client_id, t, grad)
            updates.append(params - client.eta_local * shared)
            record.entries.append(
                ClientRoundEntry(client.client_id, shared, truth_window, defended, eps_used)
            )
        new_params = fedavg_aggregate(updates, [1.0] * len(updates))
        if not np.all(np.isfinite(new_params)):
            raise NumericError(f"global parameters became non-finite after round {t}")
        transcript.rounds.append(record)
        state.observe_round(record)
        params = new_params
    return transcript


def truth_inputs_map(transcript: Transcript) -> dict[tuple[int, int], np.ndarray]:
    """Evaluator-side view: (round, client_id) -> true (k, 2) window inputs."""
    out = {}
    for rnd in transcript.rounds:
        for entry in rnd.entries:
            out[(rnd.round_t, entry.client_id)] = entry.truth_window.inputs
    return out


def holdout_windows(
    client: ClientState, spec: ModelSpec, grid: CellGrid, holdout_frac: float = 0.2
) -> list[tuple[np.ndarray, int]]:
    """The last fraction of a client's sliding windows, reserved for evaluation."""
    k = spec.window_len
    n_windows = len(client.trajectory) - k
    n_eval = max(1, math.ceil(holdout_frac * n_windows))
    out = []
    for w in range(n_windows - n_eval, n_windows):
        pts = client.trajectory.points[w : w + k + 1]
        out.append((np.array(pts[:k]), grid.cell_index(pts[k, 0], pts[k, 1])))
    return out


def first_trained_holdout_overlap(
    clients: list[ClientState], spec: ModelSpec, num_rounds: int, holdout_frac: float = 0.2
) -> int | None:
    """Lowest round index whose training window would touch the holdout, if any."""
    worst = None
    k = spec.window_len
    for c in clients:
        n_windows = len(c.trajectory) - k
        n_eval = max(1, math.ceil(holdout_frac * n_windows))
        first_eval_round = n_windows - n_eval + 1  # window index, 1-based round
        if num_rounds >= first_eval_round:
            worst = first_eval_round if worst is None else min(worst, first_eval_round)
    return worst


def evaluate_recall(
    params: np.ndarray,
    clients: list[ClientState],
    spec: ModelSpec,
    grid: CellGrid,
    top_k: int = 5,
    holdout_frac: float = 0.2,
) -> float:
    """recall@top_k of the model on every client's held-out windows."""
    rankings = []
    truths = []
    for c in sorted(clients, key=lambda c: c.client_id):
        for inputs, label in holdout_windows(c, spec, grid, holdout_frac):
            rankings.append(predict_ranking(spec, params, inputs))
            truths.append(label)
    return recall_at_k(rankings, truths, top_k)


def _b64(arr: np.ndarray) -> str:
    return base64.b64encode(np.asarray(arr, dtype="<f8").tobytes()).decode("ascii")


def _unb64(text: str) -> np.ndarray:
    return np.frombuffer(base64.b64decode(text), dtype="<f8").astype(np.float64)


def dump_transcript(transcript: Transcript, fh) -> None:
    """JSON-lines: a header, then one line per (round, client) record."""
    header = {
        "spec": transcript.spec.to_dict(),
        "seed": transcript.seed,
        "rounds": transcript.num_rounds,
        "network_ref": transcript.network_ref,
    }
    fh.write(json.dumps(header) + "\n")
    for rnd in transcript.rounds:
        for e in rnd.entries:
            doc = {
                "round": rnd.round_t,
                "client_id": e.client_id,
                "global_params_before": _b64(rnd.global_params_before),
                "shared_gradient": _b64(e.shared_gradient),
                "truth_inputs": _b64(e.truth_window.inputs.ravel()),
                "truth_label": int(e.truth_window.label),
                "defended": e.defended,
                "epsilon_used": e.epsilon_used,
            }
            fh.write(json.dumps(doc) + "\n")


def write_transcript(transcript: Transcript, path) -> None:
    with open(path, "w", encoding="utf-8") as fh:
        dump_transcript(transcript, fh)


def read_transcript(path) -> Transcript:
    try:
        with open(path, "r", encoding="utf-8") as fh:
            lines = [line for line in fh if line.strip()]
    except FileNotFoundError as exc:
        raise InputError(f"transcript file not found: {path}") from exc
    if not lines:
        raise InputError(f"{path}: empty transcript file")
    header = json.loads(lines[0])
    spec = ModelSpec.from_dict(header["spec"])
    transcript = Transcript(
        spec, int(header["seed"]), int(header["rounds"]), header.get("network_ref")
    )
    by_round: dict[int, RoundRecord] = {}
    k = spec.window_len
    for line in lines[1:]:
        doc = json.loads(line)
        t = int(doc["round"])
        params = _unb64(doc["global_params_before"])
        gradient = _unb64(doc["shared_gradient"])
        truth_flat = _unb64(doc["truth_inputs"])
        if params.shape != (spec.num_params,) or gradient.shape != (spec.num_params,):
            raise ConfigurationError(f"{path}: round {t} vectors do not match the header spec")
        if truth_flat.shape != (2 * k,):
            raise ConfigurationError(f"{path}: round {t} truth window has the wrong length")
        rec = by_round.get(t)
        if rec is None:
            rec = RoundRecord(t, params, [])
            by_round[t] = rec
        elif not np.array_equal(rec.global_params_before, params):
            raise ConfigurationError(f"{path}: round {t} records disagree on global parameters")
        entry = ClientRoundEntry(
            int(doc["client_id"]),
            gradient,
            TrainingWindow(truth_flat.reshape(k, 2), int(doc["truth_label"])),
            bool(doc["defended"]),
            doc["epsilon_used"],
        )
        rec.entries.append(entry)
    rounds = sorted(by_round)
    if rounds and rounds != list(range(1, rounds[-1] + 1)):
        raise ConfigurationError(f"{path}: rounds are not numbered consecutively from 1")
    transcript.rounds = [by_round[t] for t in rounds]
    return transcript
