"""Specification sets, their deflation on grids, and fixpoint controller synthesis."""

from __future__ import annotations

import itertools
import logging
from dataclasses import dataclass, field
from typing import Optional

import numpy as np

from .abstraction import AbstractSystem, UniformGrid
from .ode import Box

log = logging.getLogger(__name__)

OBJECTIVES = ("safety", "reachability", "reach_while_avoid")


# --- geometric sets ------------------------------------------------------------------

@dataclass(frozen=True)
class Ellipsoid:
    """``sum_i a_i (x_i - c_i)^2 <= level``."""

    center: np.ndarray
    coeffs: np.ndarray
    level: float

    def __post_init__(self):
        object.__setattr__(self, "center", np.asarray(self.center, dtype=float))
        object.__setattr__(self, "coeffs", np.broadcast_to(np.asarray(self.coeffs, dtype=float),
                                                           self.center.shape).copy())
        if self.level <= 0 or np.any(self.coeffs <= 0):
            raise ValueError("ellipsoid needs a positive level and positive coefficients")

    def contains(self, x):
        x = np.asarray(x, dtype=float)
        return np.sum(self.coeffs * (x - self.center) ** 2, axis=-1) <= self.level


@dataclass(frozen=True)
class Rectangle:
    box: Box

    def contains(self, x):
        return self.box.contains(x)


@dataclass(frozen=True)
class Complement:
    """``within`` minus the closed rectangle ``hole``."""

    hole: Box
    within: Box

    def contains(self, x):
        return self.within.contains(x) & ~self.hole.contains(x)


def _dist_to_box(x, box: Box, norm: str):
    gap = np.maximum(np.maximum(box.lower - x, x - box.upper), 0.0)
    return np.max(gap, axis=-1) if norm == "inf" else np.linalg.norm(gap, axis=-1)


def deflate_set(gset, radius: float, grid: UniformGrid, norm: str = "inf", shrink_within: bool = False) -> np.ndarray:
    """Grid points whose closed ``radius``-ball (``inf`` or ``euclid`` norm) lies in ``gset``.

    For complements, ``shrink_within`` also keeps the ball inside the outer
    box; otherwise only the hole is inflated.
    """
    if radius < 0:
        raise ValueError("deflation radius must be nonnegative")
    if norm not in ("inf", "euclid"):
        raise ValueError(f"unknown norm {norm!r}")
    X = grid.points()
    if isinstance(gset, Rectangle):
        # a ball sits in a box iff its centre sits in the shrunken box, for either norm
        out = np.all((X >= gset.box.lower + radius) & (X <= gset.box.upper - radius), axis=-1)
    elif isinstance(gset, Ellipsoid):
        a, c = gset.coeffs, gset.center
        if norm == "inf":
            # convex quadratic peaks at a vertex of the box around x
            out = np.sum(a * (np.abs(X - c) + radius) ** 2, axis=-1) <= gset.level
        else:
            # triangle inequality in the weighted norm; exact for spheres
            out = np.sqrt(np.sum(a * (X - c) ** 2, axis=-1)) + radius * np.sqrt(a.max()) <= np.sqrt(gset.level)
    elif isinstance(gset, Complement):
        out = _dist_to_box(X, gset.hole, norm) > radius if radius > 0 else ~gset.hole.contains(X)
        if shrink_within:
            out &= np.all((X >= gset.within.lower + radius) & (X <= gset.within.upper - radius), axis=-1)
        else:
            out &= gset.within.contains(X)
    else:
        raise TypeError(f"unsupported set {type(gset).__name__}")
    if not out.any():
        log.warning("deflation by %g leaves no grid point", radius)
    return out


@dataclass
class AbstractSpec:
    target: np.ndarray
    safe: np.ndarray
    objective: str = "reach_while_avoid"

    def __post_init__(self):
        if self.objective not in OBJECTIVES:
            raise ValueError(f"unknown objective {self.objective!r}")
        self.safe = np.asarray(self.safe, dtype=bool)
        self.target = np.asarray(self.target, dtype=bool) if self.target is not None else np.zeros_like(self.safe)
        if self.objective == "reach_while_avoid" and np.any(self.target & ~self.safe):
            raise ValueError("target must be contained in the safe set")


# --- controllers ---------------------------------------------------------------------

@dataclass
class Controller:
    """State-feedback map on abstract states.

    ``winning`` holds the states from which the objective is enforced and
    ``invariant`` the (larger) safe region the closed loop never leaves;
    ``choice`` is defined exactly on ``invariant``. ``rank[s]`` counts the
    steps to the target (``0`` inside it, ``-1`` outside ``winning``).
    """

    winning: np.ndarray
    choice: np.ndarray
    rank: np.ndarray
    objective: str
    meta: dict = field(default_factory=dict)
    invariant: Optional[np.ndarray] = None

    def __post_init__(self):
        self.winning = np.asarray(self.winning, dtype=bool)
        self.invariant = self.winning.copy() if self.invariant is None else np.asarray(self.invariant, dtype=bool)

    @property
    def n_states(self) -> int:
        return len(self.winning)

    def input_for(self, s: int) -> int:
        if not self.invariant[s]:
            raise KeyError(f"abstract state {s} is outside the controller domain")
        return int(self.choice[s])

    def to_text(self) -> str:
        lines = ["# dbsynth controller 1", f"# objective: {self.objective}", f"# states: {self.n_states}"]
        for k in sorted(self.meta):
            lines.append(f"# {k}: {self.meta[k]}")
        lines.append("state_index,input_index,rank")
        for s in np.nonzero(self.invariant | self.winning)[0]:
            lines.append(f"{s},{self.choice[s]},{self.rank[s] if self.winning[s] else -1}")
        return "\n".join(lines) + "\n"

    def save(self, path) -> None:
        with open(path, "w", newline="\n") as fh:
            fh.write(self.to_text())

    @classmethod
    def from_text(cls, text: str) -> "Controller":
        meta, objective, n = {}, None, None
        body = []
        for line in text.splitlines():
            if line.startswith("#"):
                key, _, val = line[1:].strip().partition(": ")
                if key == "objective":
                    objective = val
                elif key == "states":
                    n = int(val)
                elif val:
                    meta[key] = val
            elif line and not line.startswith("state_index"):
                body.append(line)
        if n is None or objective is None:
            raise ValueError("controller file lacks the objective/states header")
        invariant = np.zeros(n, dtype=bool)
        choice = np.full(n, -1, dtype=np.int32)
        rank = np.full(n, -1, dtype=np.int32)
        for line in body:
            s, u, r = (int(v) for v in line.split(","))
            invariant[s], choice[s], rank[s] = True, u, r
        return cls(rank >= 0, choice, rank, objective, meta, invariant)

    @classmethod
    def load(cls, path) -> "Controller":
        with open(path) as fh:
            return cls.from_text(fh.read())


def _first_true(ok: np.ndarray) -> np.ndarray:
    return np.where(ok.any(axis=1), np.argmax(ok, axis=1), -1).astype(np.int32)


def solve_safety(abs_: AbstractSystem, safe) -> Controller:
    """Greatest fixpoint of the controllable predecessor inside ``safe``."""
    safe = np.asarray(safe, dtype=bool)
    Z = safe.copy()
    while True:
        ok = abs_.controllable(Z)
        Zn = safe & ok.any(axis=1)
        if np.array_equal(Zn, Z):
            break
        Z = Zn
    ok = abs_.controllable(Z)
    choice = np.where(Z, _first_true(ok), -1).astype(np.int32)
    rank = np.where(Z, 0, -1).astype(np.int32)
    return Controller(Z, choice, rank, "safety")


def solve_reach_avoid(abs_: AbstractSystem, target, safe, objective: str = "reach_while_avoid") -> Controller:
    """Reach ``target`` while staying in ``safe`` forever.

    The safety kernel ``K`` of ``safe`` is computed first; the game target is
    ``target & K`` and the winning set the least fixpoint
    ``Z = (target & K) | (safe & pre(Z))`` with ranks. Non-target states of
    ``Z`` get the first input (in input-grid order) that certified them in
    the round they joined ``Z``; every other state of ``K`` keeps its
    kernel-preserving input, so the closed loop stays in ``K`` after the
    target has been visited.
    """
    target = np.asarray(target, dtype=bool)
    safe = np.asarray(safe, dtype=bool)
    if np.any(target & ~safe):
        raise ValueError("target must be contained in the safe set")
    kernel = solve_safety(abs_, safe)
    K = kernel.winning
    goal = target & K
    Z = goal.copy()
    rank = np.where(goal, 0, -1).astype(np.int32)
    choice = kernel.choice.copy()
    k = 0
    while True:
        k += 1
        ok = abs_.controllable(Z)
        new = safe & ~Z & ok.any(axis=1)
        if not new.any():
            break
        choice[new] = _first_true(ok[new])
        rank[new] = k
        Z |= new
    return Controller(Z, np.where(K, choice, -1).astype(np.int32), rank, objective, {"iterations": k - 1}, K)


@dataclass
class VerificationReport:
    ok: bool
    witnesses: list = field(default_factory=list)

    def __bool__(self):
        return self.ok


def _box_max(abs_: AbstractSystem, values: np.ndarray, states: np.ndarray, inputs: np.ndarray) -> np.ndarray:
    """Maximum of ``values`` (per state) over the successor box of each pair."""
    shape = abs_.state_grid.shape
    V = values.reshape(shape)
    lo = abs_.lo[states, inputs].astype(np.int64)
    hi = abs_.hi[states, inputs].astype(np.int64)
    ext = (hi - lo).max(axis=0) if len(states) else np.zeros(abs_.dim, dtype=np.int64)
    best = np.full(len(states), -np.inf)
    for off in itertools.product(*[range(int(e) + 1) for e in ext]):
        off = np.array(off)
        idx = lo + off
        valid = np.all(idx <= hi, axis=1)
        if not valid.any():
            continue
        sub = tuple(np.minimum(idx, np.array(shape) - 1).T)
        best = np.where(valid, np.maximum(best, V[sub]), best)
    return best


def verify_controller(abs_: AbstractSystem, ctrl: Controller, spec: AbstractSpec,
                      max_witnesses: int = 20) -> VerificationReport:
    """Model-check the abstract closed loop against ``spec``.

    Checks that ``choice`` is defined exactly on the controller domain, that
    the domain is safe and closed under the chosen inputs (no successor may
    leave it or the state grid), and for reach objectives that target
    states have rank 0 and ranks strictly decrease along every transition
    from a non-target winning state.
    """
    rep = VerificationReport(True)

    def fail(kind, s, **kw):
        rep.ok = False
        if len(rep.witnesses) < max_witnesses:
            rep.witnesses.append({"violation": kind, "state": int(s), **kw})

    W = ctrl.winning
    D = ctrl.invariant | W
    if W.shape != (abs_.n_states,):
        raise ValueError("controller does not match the abstraction")
    reach = spec.objective != "safety"
    target = spec.target if reach else np.zeros_like(W)
    for s in np.nonzero(D & ~spec.safe)[0]:
        fail("unsafe controlled state", s)
    for s in np.nonzero(~D & (ctrl.choice >= 0))[0]:
        fail("choice outside the controller domain", s)
    for s in np.nonzero(D & ((ctrl.choice < 0) | (ctrl.choice >= abs_.n_inputs)))[0]:
        fail("missing or invalid input", s, input=int(ctrl.choice[s]))
    states = np.nonzero(D & (ctrl.choice >= 0) & (ctrl.choice < abs_.n_inputs))[0]
    inputs = ctrl.choice[states].astype(np.int64)
    blocked = abs_.flags[states, inputs] != 0
    for s, u in zip(states[blocked], inputs[blocked]):
        fail("input may leave the domain", s, input=int(u))
    if abs_.mode == "box":
        inside = _box_max(abs_, (~D).astype(float), states, inputs) <= 0
    else:
        inside = abs_.controllable(D)[states, inputs]
    for s, u in zip(states[~inside & ~blocked], inputs[~inside & ~blocked]):
        fail("successor outside the controller domain", s, input=int(u))
    if reach:
        for s in np.nonzero(W & target & (ctrl.rank != 0))[0]:
            fail("target state with nonzero rank", s, rank=int(ctrl.rank[s]))
        for s in np.nonzero(W & ~target & (ctrl.rank <= 0))[0]:
            fail("non-target state without positive rank", s, rank=int(ctrl.rank[s]))
        sel = W[states] & ~target[states]
        rvals = np.where(W, ctrl.rank, np.iinfo(np.int32).max).astype(float)
        if abs_.mode == "box":
            top = _box_max(abs_, rvals, states[sel], inputs[sel])
        else:
            top = np.array([rvals[abs_.successors(s, u)].max(initial=-np.inf) for s, u in zip(states[sel], inputs[sel])])
        bad = top >= ctrl.rank[states[sel]]
        for s, u in zip(states[sel][bad], inputs[sel][bad]):
            fail("rank does not decrease", s, input=int(u))
    elif np.any(W != D):
        fail("safety controller with a domain different from its winning set", int(np.argmax(W != D)))
    return rep
