"""Location-privacy defenses and adaptive budget allocation.

Mechanisms: DP-SGD gradient perturbation, the planar Laplace mechanism over
Euclidean space, a graph exponential mechanism over the whole road network,
and its personalized variant restricted to a user's constrained domain with
shortest-path distances. Budget allocation spends exp(-gamma) of the
remaining budget each round, gamma being the measured attack risk, so risky
rounds get more noise. An enumeration auditor checks the metric ratio bound
of the graph mechanisms exactly.
"""

from __future__ import annotations

import math
from dataclasses import dataclass, field

import numpy as np

from .attack import AttackConfig, AttackReport
from .errors import BudgetExhausted, ConfigurationError, InputError
from .geo import ConstrainedDomain, RoadNetwork, shortest_path_distances

DEFAULT_EPS_FLOOR = 1e-9


@dataclass
class PrivacyBudget:
    """Per-user epsilon ledger: total, spent so far, and the per-round trail."""

    total: float
    spent: float = 0.0
    per_round: list[float] = field(default_factory=list)

    def __post_init__(self):
        if not self.total > 0:
            raise InputError("total privacy budget must be positive")

    @property
    def remaining(self) -> float:
        return self.total - self.spent


@dataclass(frozen=True)
class ImportanceParams:
    """Weights of the round-importance score gamma.

    asr_weight and ait_weight must sum to 1. ait_reference normalizes the
    iteration count so both terms are commensurate; gamma is clamped to
    [0, gamma_cap] because a one-iteration success would otherwise blow the
    score up and freeze all later allocations near zero.
    """

    asr_weight: float = 0.5
    ait_weight: float = 0.5
    ait_reference: int = 200
    gamma_cap: float = 10.0

    def __post_init__(self):
        if self.asr_weight < 0 or self.ait_weight < 0:
            raise InputError("importance weights must be nonnegative")
        if abs(self.asr_weight + self.ait_weight - 1.0) > 1e-12:
            raise InputError("importance weights must sum to 1")
        if self.ait_reference < 1:
            raise InputError("ait_reference must be >= 1")
        if not self.gamma_cap > 0:
            raise InputError("gamma_cap must be positive")


class RiskProfile:
    """Measured per-round attack risk: ASR in [0, 1], AIT in [1, N] or absent."""

    def __init__(self):
        self.asr: dict[int, float] = {}
        self.ait: dict[int, float | None] = {}

    def set_round(self, round_t: int, asr: float, ait: float | None) -> None:
        if round_t < 1:
            raise InputError("rounds are numbered from 1")
        if not 0.0 <= asr <= 1.0:
            raise InputError(f"ASR {asr} outside [0, 1]")
        if ait is not None and ait < 1:
            raise InputError(f"AIT {ait} below 1")
        if ait is None and asr > 0:
            raise InputError(f"round {round_t}: successful attacks (ASR {asr}) need an AIT value")
        self.asr[round_t] = float(asr)
        self.ait[round_t] = None if ait is None else float(ait)

    def has_round(self, round_t: int) -> bool:
        return round_t in self.asr

    @classmethod
    def from_attack_report(cls, report: AttackReport) -> "RiskProfile":
        prof = cls()
        for rm in report.per_round:
            prof.set_round(rm.round_t, rm.asr, rm.mean_ait)
        return prof


def importance(risk: RiskProfile, round_t: int, params: ImportanceParams) -> float:
    """Round importance: asr_weight * ASR + ait_weight * N_ref / AIT, clamped.

    A missing AIT (no successful attack) contributes nothing, so an
    unattackable round has importance asr_weight * 0 = 0.
    """
    if not risk.has_round(round_t):
        raise InputError(f"risk profile has no entry for round {round_t}")
    gamma = params.asr_weight * risk.asr[round_t]
    ait = risk.ait[round_t]
    if ait is not None:
        gamma += params.ait_weight * params.ait_reference / ait
    return min(max(gamma, 0.0), params.gamma_cap)


def allocate_budget(
    budget: PrivacyBudget,
    gamma: float,
    eps_floor: float = DEFAULT_EPS_FLOOR,
    clamp: bool = False,
    p_min: float = 0.01,
    p_max: float = 0.5,
) -> float:
    """Spend exp(-gamma) of the remaining budget and record it.

    The faithful rule allocates the entire remainder when gamma = 0; the
    optional clamp bounds the proportion inside [p_min, p_max] as an
    explicitly labeled mitigation of that first-round degeneracy.
    """
    remaining = budget.total - budget.spent
    if remaining <= eps_floor:
        raise BudgetExhausted(f"remaining budget {remaining:.3e} at or below floor {eps_floor:.0e}")
    p = math.exp(-gamma)
    if clamp:
        p = min(max(p, p_min), p_max)
    eps_t = p * remaining
    budget.spent += eps_t
    budget.per_round.append(eps_t)
    return eps_t


class GraphExponentialMechanism:
    """Exponential mechanism over a constrained domain with path distances.

    Scores are the negative shortest-path distances inside the subgraph
    induced by the domain, rescaled by the domain diameter so epsilon is
    unitless; sampling inverts the CDF over the sorted node order.
    """

    def __init__(self, net: RoadNetwork, domain: ConstrainedDomain, rescale: bool = True):
        domain.check_subset_of(net)
        self.net = net
        self.nodes = domain.ordered()
        self._index = {n: i for i, n in enumerate(self.nodes)}
        m = len(self.nodes)
        dist = np.zeros((m, m))
        for i, src in enumerate(self.nodes):
            d = shortest_path_distances(net, src, allowed=self.nodes)
            dist[i] = d[list(self.nodes)]
        if not np.all(np.isfinite(dist)):
            raise ConfigurationError("constrained domain is disconnected in the network")
        self.dist = dist
        self.diameter = float(dist.max())
        if rescale and self.diameter > 0:
            self.metric = dist / self.diameter
        else:
            self.metric = dist

    def distribution(self, x: int, eps: float) -> np.ndarray:
        """Output probabilities over the sorted domain nodes for true node x."""
        if x not in self._index:
            raise InputError(f"node {x} not in the constrained domain")
        if eps < 0:
            raise InputError("epsilon must be nonnegative")
        logits = -0.5 * eps * self.metric[self._index[x]]
        e = np.exp(logits - logits.max())
        return e / e.sum()

    def log_distribution(self, x: int, eps: float) -> np.ndarray:
        if x not in self._index:
            raise InputError(f"node {x} not in the constrained domain")
        logits = -0.5 * eps * self.metric[self._index[x]]
        m = logits.max()
        return logits - (m + math.log(np.exp(logits - m).sum()))

    def sample(self, x: int, eps: float, rng: np.random.Generator) -> int:
        probs = self.distribution(x, eps)
        u = rng.random()
        idx = int(np.searchsorted(np.cumsum(probs), u, side="right"))
        return self.nodes[min(idx, len(self.nodes) - 1)]


def pgem_distribution(
    x: int, domain: ConstrainedDomain, eps: float, net: RoadNetwork
) -> np.ndarray:
    """Probability vector over sorted(domain) for perturbing node x."""
    return GraphExponentialMechanism(net, domain).distribution(x, eps)


def pgem_sample(
    x: int, domain: ConstrainedDomain, eps: float, net: RoadNetwork, rng: np.random.Generator
) -> int:
    return GraphExponentialMechanism(net, domain).sample(x, eps, rng)


def geogi_sample(x: int, net: RoadNetwork, eps_per_meter: float, rng: np.random.Generator) -> int:
    """Graph exponential mechanism over all nodes with raw meter distances."""
    if not eps_per_meter > 0:
        raise InputError("epsilon must be positive")
    domain = ConstrainedDomain(frozenset(range(net.num_nodes)))
    return GraphExponentialMechanism(net, domain, rescale=False).sample(x, eps_per_meter, rng)


class FullNetworkExponentialMechanism:
    """GeoGI sampler with a per-source distance cache for repeated use."""

    def __init__(self, net: RoadNetwork, eps_per_meter: float):
        if not eps_per_meter > 0:
            raise InputError("epsilon must be positive")
        self.net = net
        self.eps = eps_per_meter
        self._dist: dict[int, np.ndarray] = {}

    def sample(self, x: int, rng: np.random.Generator) -> int:
        d = self._dist.get(x)
        if d is None:
            d = shortest_path_distances(self.net, x)
            if not np.all(np.isfinite(d)):
                raise ConfigurationError("network is disconnected")
            self._dist[x] = d
        logits = -0.5 * self.eps * d
        e = np.exp(logits - logits.max())
        probs = e / e.sum()
        u = rng.random()
        idx = int(np.searchsorted(np.cumsum(probs), u, side="right"))
        return min(idx, self.net.num_nodes - 1)


def geoi_sample(loc_xy: np.ndarray, eps_per_meter: float, rng: np.random.Generator) -> np.ndarray:
    """Planar Laplace perturbation of a planar point.

    Uniform angle plus a Gamma(2, eps) radius drawn as the sum of two
    inverse-CDF exponentials, giving the density (eps^2 / 2 pi) e^(-eps r).
    """
    if not eps_per_meter > 0:
        raise InputError("epsilon must be positive")
    p = np.asarray(loc_xy, dtype=np.float64)
    theta = rng.random() * 2.0 * math.pi
    r = -(math.log1p(-rng.random()) + math.log1p(-rng.random())) / eps_per_meter
    return p + np.array([r * math.cos(theta), r * math.sin(theta)])


def geoi_log_density(z_xy: np.ndarray, x_xy: np.ndarray, eps_per_meter: float) -> float:
    """Closed-form log density of the planar Laplace output z given input x."""
    if not eps_per_meter > 0:
        raise InputError("epsilon must be positive")
    d = float(np.hypot(*(np.asarray(z_xy, dtype=np.float64) - np.asarray(x_xy, dtype=np.float64))))
    return 2.0 * math.log(eps_per_meter) - math.log(2.0 * math.pi) - eps_per_meter * d


def dpsgd_perturb(
    grad: np.ndarray, clip_norm: float, noise_multiplier: float, rng: np.random.Generator
) -> np.ndarray:
    """Clip the gradient to clip_norm and add N(0, (noise_multiplier * clip_norm)^2) noise."""
    if not clip_norm > 0:
        raise InputError("clip_norm must be positive")
    if noise_multiplier < 0:
        raise InputError("noise_multiplier must be nonnegative")
    g = np.asarray(grad, dtype=np.float64)
    norm = float(np.linalg.norm(g))
    if norm > clip_norm:
        g = g * (clip_norm / norm)
    if noise_multiplier == 0:
        return g.copy() if g is grad else g
    return g + noise_multiplier * clip_norm * rng.standard_normal(g.shape)


@dataclass
class RiskSource:
    """Where the defender's per-round risk numbers come from.

    profile mode replays a RiskProfile measured on a prior undefended run;
    shadow mode has the defender attack its own previous round's defended
    gradients and use that as the proxy for the current round.
    """

    mode: str = "shadow"  # "profile" | "shadow"
    profile: RiskProfile | None = None
    shadow_attack: AttackConfig | None = None

    def __post_init__(self):
        if self.mode not in ("profile", "shadow"):
            raise ConfigurationError(f"unknown risk mode {self.mode!r}")
        if self.mode == "profile" and self.profile is None:
            raise ConfigurationError("profile risk mode needs a RiskProfile")


@dataclass
class DefensePlan:
    """Which mechanism defends training, and its parameters."""

    mechanism: str = "none"  # none | dpsgd | geoi | geogi | pgem_adaptive
    # dpsgd
    clip_norm: float = 1.0
    noise_multiplier: float = 1.0
    # geoi / geogi: per-use privacy parameter, per meter of (path) distance
    eps_per_meter: float = 0.01
    # pgem_adaptive
    total_epsilon: float = 10.0
    importance: ImportanceParams = field(default_factory=ImportanceParams)
    risk: RiskSource = field(default_factory=RiskSource)
    clamp_allocation: bool = False
    p_min: float = 0.01
    p_max: float = 0.5
    eps_floor: float = DEFAULT_EPS_FLOOR

    def __post_init__(self):
        known = ("none", "dpsgd", "geoi", "geogi", "pgem_adaptive")
        if self.mechanism not in known:
            raise ConfigurationError(f"unknown mechanism {self.mechanism!r}; pick one of {known}")
        if self.mechanism == "dpsgd":
            if not self.clip_norm > 0:
                raise ConfigurationError("dpsgd clip_norm must be positive")
            if self.noise_multiplier < 0:
                raise ConfigurationError("dpsgd noise_multiplier must be nonnegative")
        if self.mechanism in ("geoi", "geogi") and not self.eps_per_meter > 0:
            raise ConfigurationError(f"{self.mechanism} eps_per_meter must be positive")
        if self.mechanism == "pgem_adaptive":
            if not self.total_epsilon > 0:
                raise ConfigurationError("pgem_adaptive total_epsilon must be positive")
            if not 0 < self.p_min <= self.p_max <= 1:
                raise ConfigurationError("need 0 < p_min <= p_max <= 1")


def adaptive_defense_round(
    budget: PrivacyBudget,
    risk: RiskProfile,
    round_t: int,
    points_xy: np.ndarray,
    domain: ConstrainedDomain,
    net: RoadNetwork,
    params: ImportanceParams,
    rng: np.random.Generator,
    mechanism: GraphExponentialMechanism | None = None,
    clamp: bool = False,
    p_min: float = 0.01,
    p_max: float = 0.5,
    eps_floor: float = DEFAULT_EPS_FLOOR,
) -> tuple[np.ndarray, float]:
    """One round of the adaptive strategy for one user's window.

    Scores the round's risk, allocates a slice of the remaining budget, and
    perturbs every point of the window with the personalized graph mechanism
    at that epsilon. Points are snapped to their nearest domain node first,
    since the mechanism lives on graph vertices. Raises BudgetExhausted when
    nothing is left to spend.
    """
    gamma = importance(risk, round_t, params)
    eps_t = allocate_budget(budget, gamma, eps_floor=eps_floor, clamp=clamp, p_min=p_min, p_max=p_max)
    mech = mechanism if mechanism is not None else GraphExponentialMechanism(net, domain)
    pts = np.atleast_2d(np.asarray(points_xy, dtype=np.float64))
    out = np.empty_like(pts)
    for i, (px, py) in enumerate(pts):
        node = _nearest_domain_node(px, py, mech)
        sampled = mech.sample(node, eps_t, rng)
        out[i] = net.node_xy[sampled]
    return out, eps_t


def _nearest_domain_node(x: float, y: float, mech: GraphExponentialMechanism) -> int:
    xy = mech.net.node_xy[list(mech.nodes)]
    d2 = (xy[:, 0] - x) ** 2 + (xy[:, 1] - y) ** 2
    return mech.nodes[int(np.argmin(d2))]


def audit_ratio_bound(
    mechanism: str, net: RoadNetwork, domain: ConstrainedDomain, eps: float
) -> float:
    """Exact worst-case violation of the metric privacy ratio bound.

    Enumerates ln P(c | x) - ln P(c | x') - eps * d(x, x') over all domain
    pairs and outputs, with d in the mechanism's own metric (diameter-rescaled
    for the personalized mechanism, raw meters otherwise). A sound mechanism
    never exceeds zero beyond float noise.
    """
    if mechanism == "pgem":
        mech = GraphExponentialMechanism(net, domain, rescale=True)
    elif mechanism == "geogi":
        mech = GraphExponentialMechanism(
            net, ConstrainedDomain(frozenset(range(net.num_nodes))), rescale=False
        )
    else:
        raise InputError(f"auditable mechanisms are 'pgem' and 'geogi', not {mechanism!r}")
    nodes = mech.nodes
    logp = np.stack([mech.log_distribution(x, eps) for x in nodes])  # (m, m)
    worst = -math.inf
    for i in range(len(nodes)):
        for j in range(len(nodes)):
            if i == j:
                continue
            excess = float(np.max(logp[i] - logp[j]) - eps * mech.metric[i, j])
            worst = max(worst, excess)
    return worst if len(nodes) > 1 else 0.0
