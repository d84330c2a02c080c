"""Closed-loop refinement of abstract controllers on the continuous network."""

from __future__ import annotations

import io
import json
import logging
from dataclasses import dataclass, field
from typing import Optional, Sequence

import numpy as np

from .abstraction import AbstractSystem, LyapunovRelation, UniformGrid
from .ode import VectorField, integrate_rk4, _steps
from .synthesis import Controller

log = logging.getLogger(__name__)


class RelationViolation(RuntimeError):
    def __init__(self, subsystem, step: int, value: float, threshold: float):
        super().__init__(f"subsystem {subsystem!r}: V = {value:.6g} exceeds {threshold:.6g} at step {step}")
        self.subsystem = subsystem
        self.step = step
        self.value = value
        self.threshold = threshold


class NotWinning(RuntimeError):
    def __init__(self, subsystem, state: int):
        super().__init__(f"subsystem {subsystem!r}: abstract state {state} is outside the controller domain")
        self.subsystem = subsystem
        self.state = state


@dataclass(frozen=True)
class ProductState:
    x: np.ndarray
    x_hat: int
    v: float


def _resolve(rel: LyapunovRelation, grid: UniformGrid, abs_: AbstractSystem, x_new, s, u) -> np.ndarray:
    """Successor in the box of each ``(s, u)`` closest to ``x_new`` in ``V``."""
    lo = abs_.lo[s, u].astype(np.int64)
    hi = abs_.hi[s, u].astype(np.int64)
    if rel.P is not None and np.allclose(rel.P, np.diag(np.diag(rel.P))):
        k = np.ceil(x_new / grid.step - 0.5).astype(np.int64) - grid.kmin
        return grid.flat(np.clip(k, lo, hi))
    return np.array([rel.closest(grid, x, a, b) for x, a, b in zip(x_new, lo, hi)], dtype=np.int64)


def refine_step(ctrl: Controller, rel: LyapunovRelation, product: ProductState, nu, nu_hat, field: VectorField,
                tau: float, h: Optional[float] = None, abs_: AbstractSystem = None, subsystem=None,
                step: int = 0) -> ProductState:
    """Advance one sampling period of the product of plant and controlled abstraction.

    The plant is integrated with ``nu`` held constant; ``nu_hat`` must lie in
    the disturbance range the abstraction was built for.
    """
    if abs_ is None:
        raise ValueError("the abstraction is required to resolve successors")
    s = int(product.x_hat)
    if not ctrl.invariant[s]:
        raise NotWinning(subsystem, s)
    u = int(ctrl.choice[s])
    if u < 0:
        raise NotWinning(subsystem, s)
    if np.size(nu_hat) and "w_lower" in abs_.meta:
        nh = np.asarray(nu_hat, dtype=float)
        if np.any(nh < np.asarray(abs_.meta["w_lower"]) - 1e-12) or np.any(nh > np.asarray(abs_.meta["w_upper"]) + 1e-12):
            raise ValueError("quantised disturbance outside the range covered by the abstraction")
    mu = abs_.input_grid.point(u)
    x_new = integrate_rk4(field, product.x, mu, np.asarray(nu, dtype=float), tau, h)
    s_new = int(_resolve(rel, abs_.state_grid, abs_, x_new[None, :], np.array([s]), np.array([u]))[0])
    v = float(rel.V(x_new, abs_.state_grid.point(s_new)))
    if v > rel.threshold * (1 + rel.rtol):
        raise RelationViolation(subsystem, step + 1, v, rel.threshold)
    return ProductState(x_new, s_new, v)


@dataclass
class SimSubsystem:
    """One plant of the network with its controller artefacts.

    ``gather`` indexes the flat network state (index ``-1`` reads zero) to
    assemble the plant's disturbance input.
    """

    id: str
    field: VectorField
    offset: int
    gather: np.ndarray
    abstraction: AbstractSystem
    controller: Controller
    relation: LyapunovRelation
    target: object
    safe: object
    chi: float = np.inf
    group: str = ""

    @property
    def dim(self) -> int:
        return self.field.dim_x


@dataclass
class TrajectoryLog:
    """Sampled trajectories of every subsystem.

    Arrays are indexed ``[k, i]`` over sampling instants and subsystems;
    ``inputs[k, i]`` is the input applied on ``[k tau, (k+1) tau)`` (``-1``
    at the last instant).
    """

    ids: list
    dims: list
    offsets: list
    tau: float
    times: np.ndarray
    states: np.ndarray
    abstract: np.ndarray
    inputs: np.ndarray
    reached: np.ndarray
    safe: np.ndarray
    meta: dict = field(default_factory=dict)

    def to_csv(self) -> str:
        nmax = max(self.dims)
        out = io.StringIO()
        out.write(",".join(["time", "subsystem"] + [f"x{d}" for d in range(nmax)] +
                           ["abstract_index", "input_index", "flag_reached", "flag_safe"]) + "\n")
        for k, t in enumerate(self.times):
            for i, sid in enumerate(self.ids):
                xs = self.states[k, self.offsets[i]:self.offsets[i] + self.dims[i]]
                cells = [repr(round(float(t), 12)), sid] + [repr(float(v)) for v in xs] + [""] * (nmax - len(xs))
                cells += [str(int(self.abstract[k, i])), str(int(self.inputs[k, i])),
                          str(int(self.reached[k, i])), str(int(self.safe[k, i]))]
                out.write(",".join(cells) + "\n")
        return out.getvalue()

    def save(self, csv_path, meta_path=None) -> None:
        with open(csv_path, "w", newline="\n") as fh:
            fh.write(self.to_csv())
        if meta_path:
            with open(meta_path, "w") as fh:
                json.dump(self.meta, fh, indent=2, sort_keys=True, default=float)
                fh.write("\n")

    def trajectory(self, sid) -> np.ndarray:
        i = self.ids.index(sid)
        return self.states[:, self.offsets[i]:self.offsets[i] + self.dims[i]]


def _groups(subs: Sequence[SimSubsystem]):
    out = {}
    for a, s in enumerate(subs):
        out.setdefault(s.group or s.id, []).append(a)
    return [np.array(v) for v in out.values()]


def decide(subs: Sequence[SimSubsystem], xhat) -> np.ndarray:
    """Input index of every subsystem, read off its own abstract state only."""
    xhat = np.asarray(xhat, dtype=np.int64)
    u = np.zeros(len(subs), dtype=np.int64)
    for g in _groups(subs):
        ctrl = subs[g[0]].controller
        ch = ctrl.choice[xhat[g]].astype(np.int64)
        outside = ~ctrl.invariant[xhat[g]] | (ch < 0)
        if outside.any():
            a = int(np.argmax(outside))
            raise NotWinning(subs[g[a]].id, int(xhat[g][a]))
        u[g] = ch
    return u


def simulate_network(subs: Sequence[SimSubsystem], x0, steps: int, tau: float, h: Optional[float] = None,
                     stop_when_reached: bool = True, seed: Optional[int] = None,
                     check_envelope: bool = True) -> TrajectoryLog:
    """Synchronous closed-loop simulation of the whole network.

    At every sampling instant each controller reads only its own abstract
    state; the network ODE is then integrated jointly with shared RK4
    sub-steps, so couplings evolve continuously between samples. The
    abstract state moves to the successor closest to the new continuous
    state and the relation is checked.
    """
    h = tau / 100.0 if h is None else h
    n_sub_steps = _steps(tau, h)
    h = tau / n_sub_steps
    n = len(subs)
    total = sum(s.dim for s in subs)
    x = np.zeros(total)
    for i, s in enumerate(subs):
        x[s.offset:s.offset + s.dim] = np.asarray(x0[s.id], dtype=float)
    groups = _groups(subs)
    # per group: stacked offsets and gathers, shared field and artefacts
    gdata = []
    for g in groups:
        first = subs[g[0]]
        idx = np.array([[subs[a].offset + d for d in range(first.dim)] for a in g])
        gather = np.array([subs[a].gather for a in g]).reshape(len(g), -1)
        gather = np.where(gather < 0, total, gather)
        gdata.append((g, first, idx, gather))

    xhat = np.zeros(n, dtype=np.int64)
    for g, first, idx, _ in gdata:
        q = first.abstraction.state_grid.quantize_many(x[idx])
        for a, qi in zip(g, q):
            if qi < 0 or not subs[a].controller.winning[qi]:
                raise NotWinning(subs[a].id, int(qi))
            v = subs[a].relation.V(x[idx[list(g).index(a)]], first.abstraction.state_grid.point(qi))
            if v > subs[a].relation.threshold * (1 + subs[a].relation.rtol):
                raise RelationViolation(subs[a].id, 0, float(v), subs[a].relation.threshold)
        xhat[g] = q

    def in_target(xs):
        out = np.zeros(n, dtype=bool)
        for g, first, idx, _ in gdata:
            out[g] = first.target.contains(xs[idx])
        return out

    def in_safe(xs):
        out = np.zeros(n, dtype=bool)
        for g, first, idx, _ in gdata:
            out[g] = first.safe.contains(xs[idx])
        return out

    times = [0.0]
    states = [x.copy()]
    abstract = [xhat.copy()]
    inputs = []
    reached = [in_target(x)]
    safe = [in_safe(x)]
    vmax = np.zeros(n)
    env_ratio = 0.0
    halted = False
    for k in range(steps):
        if stop_when_reached and reached[-1].all():
            halted = True
            break
        u_idx = decide(subs, xhat)
        U = [first.abstraction.input_grid.points(u_idx[g]) for g, first, _, _ in gdata]
        x_start = x.copy()
        ok_safe = safe[-1].copy()
        for step in range(n_sub_steps):
            def f(z):
                dz = np.zeros_like(z)
                zext = np.append(z, 0.0)
                for (g, first, idx, gather), ug in zip(gdata, U):
                    dz[idx] = first.field(z[idx], ug, zext[gather])
                return dz
            k1 = f(x)
            k2 = f(x + 0.5 * h * k1)
            k3 = f(x + 0.5 * h * k2)
            k4 = f(x + h * k3)
            x = x + (h / 6.0) * (k1 + 2 * k2 + 2 * k3 + k4)
            if not np.all(np.isfinite(x)):
                raise FloatingPointError(f"non-finite network state at step {k}, sub-step {step}")
            ok_safe &= in_safe(x)
            if check_envelope:
                t = (step + 1) * h
                for g, first, idx, _ in gdata:
                    if np.isfinite(first.chi) and first.chi > 0:
                        dev = np.max(np.abs(x[idx] - x_start[idx]), axis=1)
                        env_ratio = max(env_ratio, float(np.max(dev / (first.chi * t))))
        new_hat = np.zeros(n, dtype=np.int64)
        for g, first, idx, _ in gdata:
            ab = first.abstraction
            nh = _resolve(first.relation, ab.state_grid, ab, x[idx], xhat[g], u_idx[g])
            v = first.relation.V(x[idx], ab.state_grid.points(nh))
            bad = v > first.relation.threshold * (1 + first.relation.rtol)
            if bad.any():
                a = int(np.argmax(bad))
                raise RelationViolation(subs[g[a]].id, k + 1, float(v[a]), first.relation.threshold)
            vmax[g] = np.maximum(vmax[g], v)
            new_hat[g] = nh
        xhat = new_hat
        times.append((k + 1) * tau)
        states.append(x.copy())
        abstract.append(xhat.copy())
        inputs.append(u_idx)
        reached.append(reached[-1] | in_target(x))
        safe.append(ok_safe)
    inputs.append(np.full(n, -1, dtype=np.int64))
    log_ = TrajectoryLog(
        ids=[s.id for s in subs], dims=[s.dim for s in subs], offsets=[s.offset for s in subs], tau=tau,
        times=np.array(times), states=np.array(states), abstract=np.array(abstract),
        inputs=np.array(inputs), reached=np.array(reached), safe=np.array(safe),
    )
    thr = np.array([s.relation.threshold for s in subs])
    log_.meta = {
        "steps": len(times) - 1, "halted_all_reached": bool(halted or reached[-1].all()), "seed": seed,
        "substeps": n_sub_steps, "max_relation_ratio": float(np.max(vmax / thr)) if n else 0.0,
        "max_envelope_ratio": env_ratio,
        "all_reached": bool(reached[-1].all()), "all_safe": bool(safe[-1].all()),
    }
    return log_


def sample_initial_states(subs: Sequence[SimSubsystem], seed: int, exclude_target: bool = True,
                          spread: float = 0.9) -> dict:
    """Random winning abstract states, each perturbed within ``spread * eta``.

    Reach controllers start outside their target when ``exclude_target``.
    """
    rng = np.random.default_rng(seed)
    out = {}
    for s in subs:
        grid = s.abstraction.state_grid
        cand = s.controller.winning.copy()
        if exclude_target and s.controller.objective != "safety":
            cand &= s.controller.rank > 0
        idx = np.nonzero(cand)[0]
        if len(idx) == 0:
            raise NotWinning(s.id, -1)
        q = int(idx[rng.integers(len(idx))])
        out[s.id] = grid.point(q) + rng.uniform(-spread, spread, grid.dim) * grid.eta
    return out
