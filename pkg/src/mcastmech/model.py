"""Data model for multi-rate multicast rate allocation.

Agents are grouped by the content they request. Each agent has a fixed route
(a set of links) with a positive quality weight per link, and a strictly
concave valuation of its own rate. A link carries only the largest weighted
rate of each group crossing it, so per-link group membership and a fixed
within-group member ordering are derived once at construction time and
reused by the solver, the mechanism maps, and the equilibrium engine.

Conventions used across the package:
  * groups and members are 1-based integers, links are string ids,
  * an agent is the pair (group, member), printed as "k.i",
  * weights: alpha[(agent, link)] > 0 scales the agent's rate on that link.
"""

from __future__ import annotations

import json
import math
from dataclasses import dataclass, field
from typing import Dict, List, NamedTuple, Optional, Set, Tuple

import numpy as np

from .errors import InstanceFormatError, ValidationFailure

LOG_SAT = "log_sat"
EXP_SAT = "exp_sat"
VALUATION_FAMILIES = (LOG_SAT, EXP_SAT)

#: Weighted rates below RATE_ATOL * capacity count as zero when deciding
#: which groups are active on a link.
RATE_ATOL = 1e-9


class AgentId(NamedTuple):
    group: int
    member: int

    @property
    def label(self) -> str:
        return f"{self.group}.{self.member}"

    @staticmethod
    def from_label(text: str) -> "AgentId":
        try:
            k, i = text.split(".")
            return AgentId(int(k), int(i))
        except Exception as exc:
            raise InstanceFormatError(f"bad agent label {text!r}") from exc


@dataclass(frozen=True)
class Link:
    id: str
    capacity: float


@dataclass(frozen=True)
class Valuation:
    """Saturating concave valuation of an agent's own rate.

    log_sat: a*ln(1 + b*x).  exp_sat: a*(1 - exp(-b*x)).
    Both are strictly increasing and strictly concave on x >= 0 with
    v(0) = 0 and finite marginal value a*b at zero.
    """

    family: str
    a: float
    b: float

    def value(self, x: float) -> float:
        if self.family == LOG_SAT:
            return self.a * math.log1p(self.b * x)
        return self.a * -math.expm1(-self.b * x)

    def deriv(self, x: float) -> float:
        if self.family == LOG_SAT:
            return self.a * self.b / (1.0 + self.b * x)
        return self.a * self.b * math.exp(-self.b * x)

    def second(self, x: float) -> float:
        if self.family == LOG_SAT:
            return -self.a * self.b * self.b / (1.0 + self.b * x) ** 2
        return -self.a * self.b * self.b * math.exp(-self.b * x)


@dataclass(frozen=True)
class Route:
    """An agent's fixed path plus its per-link quality weights."""

    agent: AgentId
    weights: Tuple[Tuple[str, float], ...]  # ((link_id, alpha), ...) sorted by link

    @property
    def links(self) -> Tuple[str, ...]:
        return tuple(l for l, _ in self.weights)


@dataclass
class ValidationReport:
    violations: List[Tuple[str, str]] = field(default_factory=list)

    @property
    def ok(self) -> bool:
        return not self.violations

    def add(self, code: str, message: str) -> None:
        self.violations.append((code, message))

    def as_dict(self) -> Dict[str, object]:
        return {"ok": self.ok, "violations": [list(v) for v in self.violations]}


class NetworkInstance:
    """Immutable-by-convention bundle of links, routes, and valuations.

    All per-link membership structure is precomputed here: callers must not
    mutate links/routes/valuations after construction.
    """

    def __init__(self, links: List[Link], routes: List[Route],
                 valuations: Dict[AgentId, Valuation]):
        self.links: Tuple[Link, ...] = tuple(sorted(links, key=lambda l: l.id))
        self.routes: Tuple[Route, ...] = tuple(sorted(routes, key=lambda r: r.agent))
        self.valuations: Dict[AgentId, Valuation] = dict(valuations)

        if len({l.id for l in self.links}) != len(self.links):
            raise InstanceFormatError("duplicate link id")
        seen = set()
        for r in self.routes:
            if r.agent in seen:
                raise InstanceFormatError(f"duplicate agent {r.agent.label}")
            seen.add(r.agent)
            if not r.weights:
                raise InstanceFormatError(f"agent {r.agent.label} has empty route")
        if set(valuations) != seen:
            raise InstanceFormatError("valuations must cover exactly the routed agents")

        self.capacity: Dict[str, float] = {l.id: l.capacity for l in self.links}
        self.link_ids: Tuple[str, ...] = tuple(l.id for l in self.links)
        self.agents: Tuple[AgentId, ...] = tuple(r.agent for r in self.routes)
        self.links_of: Dict[AgentId, Tuple[str, ...]] = {}
        self.alpha: Dict[Tuple[AgentId, str], float] = {}
        for r in self.routes:
            names = []
            for lid, a in r.weights:
                if lid not in self.capacity:
                    raise InstanceFormatError(
                        f"agent {r.agent.label} routed over unknown link {lid!r}")
                names.append(lid)
                self.alpha[(r.agent, lid)] = a
            if len(set(names)) != len(names):
                raise InstanceFormatError(
                    f"agent {r.agent.label} lists some link twice")
            self.links_of[r.agent] = tuple(sorted(names))

        self.groups: Tuple[int, ...] = tuple(sorted({ki.group for ki in self.agents}))
        members: Dict[Tuple[int, str], List[int]] = {}
        for ki in self.agents:
            for lid in self.links_of[ki]:
                members.setdefault((ki.group, lid), []).append(ki.member)
        self.members_on_link: Dict[Tuple[int, str], Tuple[int, ...]] = {
            key: tuple(sorted(v)) for key, v in members.items()}
        self.groups_on_link: Dict[str, Tuple[int, ...]] = {
            lid: tuple(sorted({k for (k, l2) in self.members_on_link if l2 == lid}))
            for lid in self.link_ids}
        self.agents_on_link: Dict[str, Tuple[AgentId, ...]] = {
            lid: tuple(AgentId(k, i)
                       for k in self.groups_on_link[lid]
                       for i in self.members_on_link[(k, lid)])
            for lid in self.link_ids}

        # Cyclic neighbours within a group on a link; singleton maps to itself.
        self.succ_on_link: Dict[Tuple[AgentId, str], AgentId] = {}
        self.pred_on_link: Dict[Tuple[AgentId, str], AgentId] = {}
        for (k, lid), mem in self.members_on_link.items():
            g = len(mem)
            for pos, i in enumerate(mem):
                ki = AgentId(k, i)
                self.succ_on_link[(ki, lid)] = AgentId(k, mem[(pos + 1) % g])
                self.pred_on_link[(ki, lid)] = AgentId(k, mem[(pos - 1) % g])

    def valuation(self, ki: AgentId) -> Valuation:
        return self.valuations[ki]

    def group_size_on(self, k: int, lid: str) -> int:
        return len(self.members_on_link.get((k, lid), ()))


def validate(instance: NetworkInstance) -> ValidationReport:
    """Check the soft assumptions: valuation params, positivity, link sharing.

    Structural consistency (routes reference known links, unique agents) is
    enforced at construction; this reports everything an otherwise well-formed
    instance can still get wrong.
    """
    report = ValidationReport()
    for ki, val in sorted(instance.valuations.items()):
        if val.family not in VALUATION_FAMILIES:
            report.add("A1", f"agent {ki.label}: unknown valuation family {val.family!r}")
        if not (val.a > 0.0 and math.isfinite(val.a)):
            report.add("A1", f"agent {ki.label}: valuation scale a={val.a} not positive")
        if not (val.b > 0.0 and math.isfinite(val.b)):
            report.add("A1", f"agent {ki.label}: valuation rate b={val.b} not positive")
    for link in instance.links:
        if not (link.capacity > 0.0 and math.isfinite(link.capacity)):
            report.add("positivity", f"link {link.id}: capacity {link.capacity} not positive")
    for (ki, lid), a in sorted(instance.alpha.items()):
        if not (a > 0.0 and math.isfinite(a)):
            report.add("positivity", f"agent {ki.label} on {lid}: weight {a} not positive")
    for lid in instance.link_ids:
        if len(instance.groups_on_link[lid]) < 2:
            report.add("A3", f"link {lid}: only {len(instance.groups_on_link[lid])} group(s) cross it")
    return report


def require_valid(instance: NetworkInstance) -> None:
    report = validate(instance)
    if not report.ok:
        raise ValidationFailure(
            "; ".join(f"[{c}] {m}" for c, m in report.violations),
            violations=report.violations)


def group_link_order(instance: NetworkInstance, k: int, lid: str) -> Tuple[int, ...]:
    """Members of group k on a link, in the fixed ascending order."""
    try:
        return instance.members_on_link[(k, lid)]
    except KeyError:
        raise KeyError(f"group {k} does not cross link {lid!r}") from None


def successor_on_link(instance: NetworkInstance, ki: AgentId, lid: str) -> AgentId:
    """Cyclic successor of ki within its group on a link.

    Raises ValueError for a singleton group: there is no distinct neighbour,
    and callers that rely on the self-cyclic convention must opt in via
    instance.succ_on_link directly.
    """
    order = group_link_order(instance, ki.group, lid)
    if len(order) == 1:
        raise ValueError(f"singleton group on link: {ki.label} alone on {lid}")
    return instance.succ_on_link[(ki, lid)]


def predecessor_on_link(instance: NetworkInstance, ki: AgentId, lid: str) -> AgentId:
    order = group_link_order(instance, ki.group, lid)
    if len(order) == 1:
        raise ValueError(f"singleton group on link: {ki.label} alone on {lid}")
    return instance.pred_on_link[(ki, lid)]


def welfare(instance: NetworkInstance, x: Dict[AgentId, float]) -> float:
    return sum(instance.valuation(ki).value(x[ki]) for ki in instance.agents)


def constraint_violation(instance: NetworkInstance, x: Dict[AgentId, float],
                         m: Dict[Tuple[int, str], float]) -> float:
    """Max violation of nonnegativity, capacity, and per-member bounding.

    Zero (or a few ulps) means the pair (x, m) is feasible for the shared
    allocation problem.
    """
    worst = 0.0
    for ki in instance.agents:
        worst = max(worst, -x[ki])
    for lid in instance.link_ids:
        total = sum(m[(k, lid)] for k in instance.groups_on_link[lid])
        worst = max(worst, total - instance.capacity[lid])
        for k in instance.groups_on_link[lid]:
            for i in instance.members_on_link[(k, lid)]:
                ki = AgentId(k, i)
                worst = max(worst, instance.alpha[(ki, lid)] * x[ki] - m[(k, lid)])
    return worst


# ---------------------------------------------------------------------------
# Random instances

def random_instance(seed: int, n_groups: int = 3, max_group_size: int = 3,
                    n_links: int = 3, density: float = 0.7,
                    max_tries: int = 1000) -> NetworkInstance:
    """Seeded random instance generator.

    Weights are drawn from U[0.5, 2], capacities from U[5, 50], valuation
    parameters from U[0.5, 5] with a fair family coin. Route sets are
    resampled until every link is crossed by at least two groups and every
    link is used; a budget of draws guards against absurd arguments.
    """
    if n_groups < 2:
        raise ValueError("need at least two groups")
    rng = np.random.default_rng(seed)
    link_ids = [f"l{j + 1}" for j in range(n_links)]
    caps = {lid: float(rng.uniform(5.0, 50.0)) for lid in link_ids}
    sizes = [int(rng.integers(1, max_group_size + 1)) for _ in range(n_groups)]
    agents = [AgentId(k + 1, i + 1) for k, size in enumerate(sizes) for i in range(size)]

    for _ in range(max_tries):
        routes_links: Dict[AgentId, List[str]] = {}
        for ki in agents:
            picked = [lid for lid in link_ids if rng.random() < density]
            if not picked:
                picked = [link_ids[int(rng.integers(0, n_links))]]
            routes_links[ki] = picked
        cover: Dict[str, Set[int]] = {lid: set() for lid in link_ids}
        for ki, ls in routes_links.items():
            for lid in ls:
                cover[lid].add(ki.group)
        if all(len(groups) >= 2 for groups in cover.values()):
            break
    else:
        raise ValidationFailure(
            f"could not sample routes with two groups per link in {max_tries} tries")

    links = [Link(lid, caps[lid]) for lid in link_ids]
    routes = []
    valuations = {}
    for ki in agents:
        weights = tuple(sorted((lid, float(rng.uniform(0.5, 2.0)))
                               for lid in routes_links[ki]))
        routes.append(Route(ki, weights))
        family = LOG_SAT if rng.random() < 0.5 else EXP_SAT
        valuations[ki] = Valuation(family, float(rng.uniform(0.5, 5.0)),
                                   float(rng.uniform(0.5, 5.0)))
    return NetworkInstance(links, routes, valuations)


# ---------------------------------------------------------------------------
# Canonical JSON round trip

def instance_to_dict(instance: NetworkInstance) -> Dict[str, object]:
    return {
        "links": [{"id": l.id, "capacity": l.capacity} for l in instance.links],
        "agents": [
            {
                "group": r.agent.group,
                "member": r.agent.member,
                "valuation": {
                    "family": instance.valuations[r.agent].family,
                    "a": instance.valuations[r.agent].a,
                    "b": instance.valuations[r.agent].b,
                },
                "route": [{"link": lid, "alpha": a} for lid, a in r.weights],
            }
            for r in instance.routes
        ],
    }


def instance_to_json(instance: NetworkInstance) -> str:
    return json.dumps(instance_to_dict(instance), indent=2, sort_keys=True) + "\n"


def instance_from_dict(data: Dict[str, object]) -> NetworkInstance:
    try:
        links = [Link(str(d["id"]), float(d["capacity"])) for d in data["links"]]
        routes = []
        valuations = {}
        for d in data["agents"]:
            ki = AgentId(int(d["group"]), int(d["member"]))
            weights = tuple(sorted((str(e["link"]), float(e["alpha"]))
                                   for e in d["route"]))
            routes.append(Route(ki, weights))
            v = d["valuation"]
            valuations[ki] = Valuation(str(v["family"]), float(v["a"]), float(v["b"]))
    except InstanceFormatError:
        raise
    except Exception as exc:
        raise InstanceFormatError(f"instance document malformed: {exc}") from exc
    return NetworkInstance(links, routes, valuations)


def instance_from_json(text: str) -> NetworkInstance:
    try:
        data = json.loads(text)
    except json.JSONDecodeError as exc:
        raise InstanceFormatError(f"not valid JSON: {exc}") from exc
    if not isinstance(data, dict) or "links" not in data or "agents" not in data:
        raise InstanceFormatError("instance document must have 'links' and 'agents'")
    return instance_from_dict(data)


def save_instance(instance: NetworkInstance, path: str) -> None:
    with open(path, "w", encoding="utf-8") as fh:
        fh.write(instance_to_json(instance))


def load_instance(path: str) -> NetworkInstance:
    with open(path, "r", encoding="utf-8") as fh:
        return instance_from_json(fh.read())
