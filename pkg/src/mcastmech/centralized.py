"""Centralized welfare-optimal rate allocation with dual certificates.

Solves, for a validated instance,

    maximize   sum_ki v_ki(x_ki)
    over       x_ki >= 0,  m_{k,l} for every group k crossing link l
    subject to sum_{k on l} m_{k,l} <= c_l          (capacity, one per link)
               alpha_{ki,l} * x_ki <= m_{k,l}       (bounding, one per member)

by an interior-point log-barrier method with Newton inner iterations. The
barrier multipliers lambda_l = kappa / capacity_slack and
mu_{ki,l} = kappa / bounding_slack converge to the exact duals as kappa
shrinks. Once kappa is small the solver attempts an active-set Newton
"polish" that drives the KKT residuals to machine precision and yields
exact zeros/complementarity; if the polish step misclassifies a degenerate
constraint it is rejected and the barrier simply continues deeper.

Stationarity ties the duals together: for every positive rate
v'(x) = sum_l mu * alpha, and on every link the per-group dual sums match
the link dual, lambda_l = sum_{members} mu. Both are part of the residual
report, as is the sharing diagnostic |S_l| (number of groups with a
positive member rate on each link).
"""

from __future__ import annotations

import json
import math
from dataclasses import dataclass, field
from typing import Dict, List, Optional, Tuple

import numpy as np

from .errors import SolverError
from .model import AgentId, NetworkInstance, RATE_ATOL, require_valid

#: Default target for the max KKT residual across all blocks.
DEFAULT_TOL = 1e-9

#: Barrier stage schedule.
KAPPA_SHRINK = 0.12
KAPPA_MIN = 1e-13

#: Polish is attempted once the barrier parameter is at or below this.
POLISH_KAPPA = 1e-5


@dataclass
class PrimalSolution:
    x: Dict[AgentId, float]
    m: Dict[Tuple[int, str], float]


@dataclass
class KKTReport:
    primal_feas: float
    dual_feas: float
    comp_slack: float
    stationarity: float
    a4_holds: bool
    s_sizes: Dict[str, int]

    @property
    def max_residual(self) -> float:
        return max(self.primal_feas, self.dual_feas, self.comp_slack, self.stationarity)

    def as_dict(self) -> Dict[str, object]:
        return {
            "primal_feas": self.primal_feas,
            "dual_feas": self.dual_feas,
            "comp_slack": self.comp_slack,
            "stationarity": self.stationarity,
            "max_residual": self.max_residual,
            "a4_holds": self.a4_holds,
            "s_sizes": dict(sorted(self.s_sizes.items())),
        }


@dataclass
class DualCertificate:
    lam: Dict[str, float]
    mu: Dict[Tuple[AgentId, str], float]
    residuals: KKTReport


@dataclass
class A4Report:
    s_sizes: Dict[str, int]
    holds: bool


class _Workspace:
    """Index bookkeeping for the stacked variable vector z = [x..., m...]."""

    def __init__(self, inst: NetworkInstance):
        self.inst = inst
        self.agents = list(inst.agents)
        self.aidx = {ki: j for j, ki in enumerate(self.agents)}
        self.mpairs: List[Tuple[int, str]] = [
            (k, lid) for lid in inst.link_ids for k in inst.groups_on_link[lid]]
        self.midx = {p: j for j, p in enumerate(self.mpairs)}
        self.nx = len(self.agents)
        self.nm = len(self.mpairs)
        self.n = self.nx + self.nm
        # Bounding constraints, one per (agent, link on its route).
        self.bnd: List[Tuple[AgentId, str, int, int, float]] = []
        for ki in self.agents:
            for lid in inst.links_of[ki]:
                self.bnd.append((ki, lid, self.aidx[ki],
                                 self.midx[(ki.group, lid)], inst.alpha[(ki, lid)]))
        self.b_ix = np.array([b[2] for b in self.bnd], dtype=int)
        # global indices into z for the m component of each bounding constraint
        self.b_im = np.array([b[3] + self.nx for b in self.bnd], dtype=int)
        self.b_al = np.array([b[4] for b in self.bnd])
        self.link_midx = {lid: np.array([self.midx[(k, lid)]
                                         for k in inst.groups_on_link[lid]], dtype=int)
                          for lid in inst.link_ids}
        self.caps = {lid: inst.capacity[lid] for lid in inst.link_ids}

    def value(self, x: np.ndarray) -> float:
        return sum(self.inst.valuation(ki).value(x[j]) for j, ki in enumerate(self.agents))

    def dvalue(self, x: np.ndarray) -> np.ndarray:
        return np.array([self.inst.valuation(ki).deriv(x[j])
                         for j, ki in enumerate(self.agents)])

    def d2value(self, x: np.ndarray) -> np.ndarray:
        return np.array([self.inst.valuation(ki).second(x[j])
                         for j, ki in enumerate(self.agents)])

def _interior_start(ws: _Workspace, seed: Optional[int]) -> np.ndarray:
    inst = ws.inst
    rng = np.random.default_rng(seed) if seed is not None else None
    z = np.zeros(ws.n)
    for (k, lid), j in ws.midx.items():
        frac = 0.5 if rng is None else float(rng.uniform(0.35, 0.65))
        z[ws.nx + j] = inst.capacity[lid] * frac / len(inst.groups_on_link[lid])
    for ki, j in ws.aidx.items():
        lo = min(z[ws.nx + ws.midx[(ki.group, lid)]] / inst.alpha[(ki, lid)]
                 for lid in inst.links_of[ki])
        frac = 0.5 if rng is None else float(rng.uniform(0.3, 0.7))
        z[j] = lo * frac
    return z


def _barrier_phi(ws: _Workspace, z: np.ndarray, kappa: float) -> float:
    x = z[:ws.nx]
    if np.any(x <= 0.0):
        return -math.inf
    m = z[ws.nx:]
    total = ws.value(x) + kappa * float(np.sum(np.log(x)))
    for lid in ws.inst.link_ids:
        s = ws.caps[lid] - float(np.sum(m[ws.link_midx[lid]]))
        if s <= 0.0:
            return -math.inf
        total += kappa * math.log(s)
    s_bnd = m[ws.b_im - ws.nx] - ws.b_al * x[ws.b_ix]
    if np.any(s_bnd <= 0.0):
        return -math.inf
    total += kappa * float(np.sum(np.log(s_bnd)))
    return total


def _newton_stage(ws: _Workspace, z: np.ndarray, kappa: float,
                  max_steps: int = 80) -> np.ndarray:
    n, nx = ws.n, ws.nx
    for _ in range(max_steps):
        x = z[:nx]
        m = z[nx:]
        s_bnd = m[ws.b_im - nx] - ws.b_al * x[ws.b_ix]
        g = np.zeros(n)
        H = np.zeros((n, n))
        g[:nx] = ws.dvalue(x) + kappa / x
        d2 = ws.d2value(x) - kappa / x ** 2
        H[np.arange(nx), np.arange(nx)] = d2
        inv_b = kappa / s_bnd ** 2
        np.add.at(g, ws.b_ix, -kappa * ws.b_al / s_bnd)
        np.add.at(g, ws.b_im, kappa / s_bnd)
        np.add.at(H, (ws.b_ix, ws.b_ix), -inv_b * ws.b_al ** 2)
        np.add.at(H, (ws.b_im, ws.b_im), -inv_b)
        np.add.at(H, (ws.b_ix, ws.b_im), inv_b * ws.b_al)
        np.add.at(H, (ws.b_im, ws.b_ix), inv_b * ws.b_al)
        for lid in ws.inst.link_ids:
            idx = ws.link_midx[lid] + nx
            s = ws.caps[lid] - float(np.sum(m[ws.link_midx[lid]]))
            g[idx] -= kappa / s
            H[np.ix_(idx, idx)] -= kappa / s ** 2
        try:
            d = np.linalg.solve(-H, g)
        except np.linalg.LinAlgError:
            d = np.linalg.lstsq(-H, g, rcond=None)[0]
        decrement = float(g @ d)
        phi0 = _barrier_phi(ws, z, kappa)
        if decrement <= 1e-14 * (1.0 + abs(phi0)):
            break
        # Fraction-to-boundary, then backtrack on the barrier objective.
        step = 1.0
        dx = d[:nx]
        neg = dx < 0
        if np.any(neg):
            step = min(step, 0.95 * float(np.min(-x[neg] / dx[neg])))
        d_bnd = d[ws.b_im] - ws.b_al * dx[ws.b_ix]
        neg = d_bnd < 0
        if np.any(neg):
            step = min(step, 0.95 * float(np.min(-s_bnd[neg] / d_bnd[neg])))
        for lid in ws.inst.link_ids:
            ds = -float(np.sum(d[ws.link_midx[lid] + nx]))
            if ds < 0:
                s = ws.caps[lid] - float(np.sum(m[ws.link_midx[lid]]))
                step = min(step, 0.95 * s / -ds)
        for _ in range(60):
            trial = z + step * d
            if _barrier_phi(ws, trial, kappa) >= phi0 + 0.25 * step * decrement:
                z = trial
                break
            step *= 0.5
        else:
            break
    return z


def _extract(ws: _Workspace, z: np.ndarray, kappa: float):
    x = z[:ws.nx]
    m = z[ws.nx:]
    primal = PrimalSolution(
        x={ki: float(x[j]) for ki, j in ws.aidx.items()},
        m={p: float(m[j]) for p, j in ws.midx.items()})
    lam = {}
    for lid in ws.inst.link_ids:
        s = ws.caps[lid] - float(np.sum(m[ws.link_midx[lid]]))
        lam[lid] = kappa / s
    s_bnd = m[ws.b_im - ws.nx] - ws.b_al * x[ws.b_ix]
    mu = {(b[0], b[1]): float(kappa / s_bnd[j]) for j, b in enumerate(ws.bnd)}
    return primal, lam, mu


def check_a4(instance: NetworkInstance, primal: PrimalSolution) -> A4Report:
    """Count groups with a meaningfully positive member rate on each link."""
    sizes = {}
    for lid in instance.link_ids:
        thresh = RATE_ATOL * instance.capacity[lid]
        count = 0
        for k in instance.groups_on_link[lid]:
            if any(primal.x[AgentId(k, i)] > thresh
                   for i in instance.members_on_link[(k, lid)]):
                count += 1
        sizes[lid] = count
    return A4Report(sizes, all(c >= 2 for c in sizes.values()))


def kkt_residuals(instance: NetworkInstance, primal: PrimalSolution,
                  lam: Dict[str, float],
                  mu: Dict[Tuple[AgentId, str], float]) -> KKTReport:
    """Max-norm residual per optimality block, plus the sharing diagnostic."""
    primal_feas = 0.0
    for ki in instance.agents:
        primal_feas = max(primal_feas, -primal.x[ki])
    link_slack = {}
    for lid in instance.link_ids:
        total = sum(primal.m[(k, lid)] for k in instance.groups_on_link[lid])
        link_slack[lid] = instance.capacity[lid] - total
        primal_feas = max(primal_feas, total - instance.capacity[lid])
    dual_feas = 0.0
    comp = 0.0
    for lid in instance.link_ids:
        dual_feas = max(dual_feas, -lam[lid])
        comp = max(comp, abs(lam[lid] * link_slack[lid]))
    stat = 0.0
    for ki in instance.agents:
        price = 0.0
        thresh = RATE_ATOL * max(instance.capacity[lid] for lid in instance.links_of[ki])
        for lid in instance.links_of[ki]:
            a = instance.alpha[(ki, lid)]
            mval = mu[(ki, lid)]
            dual_feas = max(dual_feas, -mval)
            gap = a * primal.x[ki] - primal.m[(ki.group, lid)]
            primal_feas = max(primal_feas, gap)
            comp = max(comp, abs(mval * gap))
            price += mval * a
        resid = instance.valuation(ki).deriv(primal.x[ki]) - price
        if primal.x[ki] > thresh:
            stat = max(stat, abs(resid))
        else:
            stat = max(stat, resid)  # only overpricing is allowed at zero
    for lid in instance.link_ids:
        for k in instance.groups_on_link[lid]:
            total = sum(mu[(AgentId(k, i), lid)]
                        for i in instance.members_on_link[(k, lid)])
            stat = max(stat, abs(lam[lid] - total))
    a4 = check_a4(instance, primal)
    return KKTReport(primal_feas, dual_feas, comp, stat, a4.holds, a4.s_sizes)


def _polish_try(ws: _Workspace, primal: PrimalSolution, lam: Dict[str, float],
                mu: Dict[Tuple[AgentId, str], float], active_links,
                forced_links, zero_x, x_scale: float, sk: float):
    """Solve the reduced KKT equality system for one active-set guess."""
    inst = ws.inst
    act_set = set(active_links)
    active_bnd = []
    for (ki, lid, _, _, a) in ws.bnd:
        if lid not in act_set:
            continue
        gap = primal.m[(ki.group, lid)] - a * primal.x[ki]
        if lid not in forced_links:
            if gap < sk * max(1.0, inst.capacity[lid]):
                active_bnd.append((ki, lid))
        else:
            # gaps are untrustworthy on a link the threshold did not classify
            # as tight; fall back to the structural rule that a binding link
            # binds each group at its weighted peak members
            peak = max(
                inst.alpha[(AgentId(ki.group, i), lid)] * primal.x[AgentId(ki.group, i)]
                for i in inst.members_on_link[(ki.group, lid)])
            if a * primal.x[ki] >= peak - sk * x_scale:
                active_bnd.append((ki, lid))

    free_x = [ki for ki in ws.agents if ki not in zero_x]
    m_unknown = [(k, lid) for lid in active_links for k in inst.groups_on_link[lid]]
    ix = {ki: j for j, ki in enumerate(free_x)}
    im = {p: len(free_x) + j for j, p in enumerate(m_unknown)}
    il = {lid: len(free_x) + len(m_unknown) + j for j, lid in enumerate(active_links)}
    iu = {p: len(free_x) + len(m_unknown) + len(active_links) + j
          for j, p in enumerate(active_bnd)}
    n = len(free_x) + len(m_unknown) + len(active_links) + len(active_bnd)

    z = np.zeros(n)
    for ki, j in ix.items():
        z[j] = primal.x[ki]
    for p, j in im.items():
        z[j] = primal.m[p]
    for lid, j in il.items():
        z[j] = lam[lid]
    for p, j in iu.items():
        z[j] = mu[p]

    bnd_by_agent: Dict[AgentId, List[Tuple[str, float]]] = {}
    for (ki, lid) in active_bnd:
        bnd_by_agent.setdefault(ki, []).append((lid, inst.alpha[(ki, lid)]))

    def residual_and_jac(z):
        F = np.zeros(n)
        J = np.zeros((n, n))
        row = 0
        # marginal value balance for each free rate
        for ki in free_x:
            xv = z[ix[ki]]
            val = inst.valuation(ki)
            F[row] = val.deriv(xv)
            J[row, ix[ki]] = val.second(xv)
            for (lid, a) in bnd_by_agent.get(ki, ()):  # only active constraints price
                F[row] -= z[iu[(ki, lid)]] * a
                J[row, iu[(ki, lid)]] = -a
            row += 1
        # per-group dual sums match the link dual
        for p in m_unknown:
            k, lid = p
            F[row] = -z[il[lid]]
            J[row, il[lid]] = -1.0
            for i in inst.members_on_link[(k, lid)]:
                key = (AgentId(k, i), lid)
                if key in iu:
                    F[row] += z[iu[key]]
                    J[row, iu[key]] = 1.0
            row += 1
        # tight capacity
        for lid in active_links:
            F[row] = -inst.capacity[lid]
            for k in inst.groups_on_link[lid]:
                F[row] += z[im[(k, lid)]]
                J[row, im[(k, lid)]] = 1.0
            row += 1
        # tight bounding
        for (ki, lid) in active_bnd:
            a = inst.alpha[(ki, lid)]
            F[row] = -z[im[(ki.group, lid)]]
            J[row, im[(ki.group, lid)]] = -1.0
            if ki in ix:
                F[row] += a * z[ix[ki]]
                J[row, ix[ki]] = a
            row += 1
        return F, J

    def residual_or_none(zv):
        # wild least-squares steps on flat systems can leave the valuation
        # domain entirely (huge negative rates); treat that as a failed trial
        try:
            return residual_and_jac(zv)
        except (OverflowError, ValueError, ZeroDivisionError):
            return None

    scale = 1.0 + max(abs(inst.valuation(ki).deriv(0.0)) for ki in ws.agents)
    for _ in range(40):
        got = residual_or_none(z)
        if got is None:
            return None
        F, J = got
        err = float(np.max(np.abs(F)))
        if err <= 1e-13 * scale:
            break
        try:
            step = np.linalg.lstsq(J, -F, rcond=None)[0]
        except np.linalg.LinAlgError:
            return None
        damp = 1.0
        for _ in range(30):
            trial = z + damp * step
            got_t = residual_or_none(trial)
            if got_t is not None and float(np.max(np.abs(got_t[0]))) < err:
                z = trial
                break
            damp *= 0.5
        else:
            break

    tiny = 1e-11 * max(1.0, x_scale)
    x_out = {}
    for ki in ws.agents:
        v = 0.0 if ki in zero_x else float(z[ix[ki]])
        if v < 0.0:
            if v < -tiny:
                return None
            v = 0.0
        x_out[ki] = v
    m_out = dict(primal.m)
    for p, j in im.items():
        m_out[p] = float(z[j])
    lam_out = {lid: 0.0 for lid in inst.link_ids}
    mu_out = {(b[0], b[1]): 0.0 for b in ws.bnd}
    for lid, j in il.items():
        if z[j] < -tiny:
            return None
        lam_out[lid] = max(0.0, float(z[j]))
    for p, j in iu.items():
        if z[j] < -tiny:
            return None
        mu_out[p] = max(0.0, float(z[j]))
    return PrimalSolution(x_out, m_out), lam_out, mu_out


def _polish(ws: _Workspace, primal: PrimalSolution, lam: Dict[str, float],
            mu: Dict[Tuple[AgentId, str], float], kappa: float):
    """Active-set Newton refinement of a nearly-converged barrier point.

    Classifies constraints by comparing slack against multiplier (both scale
    like sqrt(kappa) at the crossover) and solves the reduced KKT equality
    system with damped Newton / least squares. Near-saturated valuations can
    stall the barrier at an interior point where the threshold sees no tight
    link, yet strictly increasing valuations guarantee at least one binding
    link at the true optimum — so successively larger prefixes of the links
    ordered by relative slack are also tried. A wrong guess is discarded by
    the sign checks and by comparing full KKT residuals (the caller accepts
    a refinement only when it beats the barrier point); the best residual
    wins among the attempts.
    """
    inst = ws.inst
    sk = math.sqrt(kappa)
    x_scale = max(1.0, max(abs(v) for v in primal.x.values()))
    zero_x = {ki for ki, v in primal.x.items() if v < sk * x_scale}

    def rel_slack(lid):
        used = sum(primal.m[(k, lid)] for k in inst.groups_on_link[lid])
        return (inst.capacity[lid] - used) / max(1.0, inst.capacity[lid])

    ordered = sorted(inst.link_ids, key=rel_slack)
    classified = sum(1 for lid in inst.link_ids if rel_slack(lid) < sk)
    best = None
    for j in range(max(classified, 1), len(ordered) + 1):
        active_links = sorted(ordered[:j])
        forced_links = set(ordered[classified:j])
        got = _polish_try(ws, primal, lam, mu, active_links, forced_links,
                          zero_x, x_scale, sk)
        if got is None:
            continue
        rep = kkt_residuals(inst, got[0], got[1], got[2])
        if best is None or rep.max_residual < best[1]:
            best = (got, rep.max_residual)
        if rep.max_residual <= 1e-12 * x_scale:
            break
    return best[0] if best else None


def solve_cp(instance: NetworkInstance, tol: float = DEFAULT_TOL,
             init_seed: Optional[int] = None, polish: bool = True,
             kappa0: Optional[float] = None
             ) -> Tuple[PrimalSolution, DualCertificate]:
    """Barrier solve to the requested max KKT residual.

    init_seed jitters the strictly interior start (useful for probing that
    independent runs agree); the path itself is deterministic given the seed.
    """
    if tol <= 0.0:
        raise ValueError(f"tolerance must be positive, got {tol}")
    require_valid(instance)
    ws = _Workspace(instance)
    z = _interior_start(ws, init_seed)
    x0 = z[:ws.nx]
    if kappa0 is None:
        kappa0 = max(1.0, float(ws.dvalue(x0) @ x0) / max(1, ws.n))
    kappa = kappa0
    best = None
    while kappa >= KAPPA_MIN:
        z = _newton_stage(ws, z, kappa)
        primal, lam, mu = _extract(ws, z, kappa)
        report = kkt_residuals(instance, primal, lam, mu)
        if best is None or report.max_residual < best[3].max_residual:
            best = (primal, lam, mu, report)
        if polish and kappa <= POLISH_KAPPA:
            refined = _polish(ws, primal, lam, mu, kappa)
            if refined is not None:
                p2, l2, m2 = refined
                rep2 = kkt_residuals(instance, p2, l2, m2)
                if rep2.max_residual <= min(tol, report.max_residual):
                    best = (p2, l2, m2, rep2)
                    break
        if report.max_residual <= tol:
            break
        kappa *= KAPPA_SHRINK
    primal, lam, mu, report = best
    if report.max_residual > tol:
        raise SolverError(
            f"barrier stalled at max residual {report.max_residual:.3e} > tol {tol:.3e}")
    return primal, DualCertificate(lam, mu, report)


def argmax_ties(instance: NetworkInstance, primal: PrimalSolution,
                rtol: float = 1e-6) -> Dict[Tuple[int, str], List[int]]:
    """Members attaining the group's weighted peak on each link, within rtol.

    More than one member means the bounding duals on that (group, link) are
    not unique; downstream consumers get the tie set instead of a warning.
    """
    ties = {}
    for (k, lid), members in instance.members_on_link.items():
        vals = {i: instance.alpha[(AgentId(k, i), lid)] * primal.x[AgentId(k, i)]
                for i in members}
        peak = max(vals.values())
        ties[(k, lid)] = [i for i, v in vals.items()
                          if v >= peak - rtol * max(1.0, peak)]
    return ties


def solution_to_dict(instance: NetworkInstance, primal: PrimalSolution,
                     dual: DualCertificate) -> Dict[str, object]:
    return {
        "x": {ki.label: primal.x[ki] for ki in instance.agents},
        "m": {f"{k}|{lid}": primal.m[(k, lid)]
              for (k, lid) in sorted(primal.m)},
        "lambda": {lid: dual.lam[lid] for lid in instance.link_ids},
        "mu": {f"{ki.label}|{lid}": dual.mu[(ki, lid)]
               for (ki, lid) in sorted(dual.mu, key=lambda p: (p[0], p[1]))},
        "residuals": dual.residuals.as_dict(),
        "welfare": sum(instance.valuation(ki).value(primal.x[ki])
                       for ki in instance.agents),
        "peak_ties": {f"{k}|{lid}": v
                      for (k, lid), v in sorted(argmax_ties(instance, primal).items())},
    }


def solution_to_json(instance: NetworkInstance, primal: PrimalSolution,
                     dual: DualCertificate) -> str:
    return json.dumps(solution_to_dict(instance, primal, dual),
                      indent=2, sort_keys=True) + "\n"
