"""Finite metric systems, networks and the disturbance-bisimulation checker.

States, inputs and disturbance values are explicit lists of real vectors.
A piecewise-constant disturbance signal is represented by its single value;
the checker only ever needs the value at the start of a step.
"""

from __future__ import annotations

import itertools
import logging
from dataclasses import dataclass, field
from typing import Hashable, Iterable, Mapping, Optional, Sequence

import numpy as np

log = logging.getLogger(__name__)

_TOL = 1e-12


class NetworkTopology:
    """Index set plus an irreflexive connectivity relation.

    An edge ``(j, i)`` means the state of ``j`` disturbs ``i``.
    """

    def __init__(self, index_set: Sequence[Hashable], edges: Iterable = ()):
        self.index_set = tuple(index_set)
        if len(set(self.index_set)) != len(self.index_set):
            raise ValueError("duplicate subsystem ids")
        self._pos = {k: a for a, k in enumerate(self.index_set)}
        edges = frozenset(tuple(e) for e in edges)
        for j, i in edges:
            if j == i:
                raise ValueError(f"self-loop on {i!r}: the connectivity relation is irreflexive")
            if j not in self._pos or i not in self._pos:
                raise ValueError(f"edge ({j!r}, {i!r}) references an unknown subsystem")
        self.edges = edges
        self._nbrs = {i: tuple(j for j in self.index_set if (j, i) in edges) for i in self.index_set}

    def __repr__(self):
        return f"NetworkTopology({list(self.index_set)!r}, {sorted(self.edges, key=repr)!r})"

    def __contains__(self, i):
        return i in self._pos

    def position(self, i) -> int:
        return self._pos[i]

    def order(self, subset: Iterable) -> tuple:
        subset = set(subset)
        unknown = subset - set(self.index_set)
        if unknown:
            raise KeyError(f"unknown subsystem ids {sorted(map(repr, unknown))}")
        return tuple(i for i in self.index_set if i in subset)

    def neighbors(self, i, ordered: bool = True):
        """Subsystems feeding ``i``; a tuple in index order (``ordered``) or a set."""
        if i not in self._pos:
            raise KeyError(f"unknown subsystem id {i!r}")
        return self._nbrs[i] if ordered else set(self._nbrs[i])

    def internal_neighbors(self, i, subset: Iterable) -> tuple:
        subset = set(subset)
        return tuple(j for j in self.neighbors(i) if j in subset)

    def external_neighbors(self, i, subset: Iterable) -> tuple:
        subset = set(subset)
        return tuple(j for j in self.neighbors(i) if j not in subset)

    def subset_neighbors(self, subset: Iterable) -> tuple:
        """Neighbours of a subset reached through edges leaving the subset."""
        subset = set(self.order(subset))
        found = {j for i in subset for j in self.neighbors(i) if j not in subset}
        return tuple(j for j in self.index_set if j in found)


def neighbors(topology: NetworkTopology, i):
    return topology.neighbors(i, ordered=False)


@dataclass(frozen=True)
class VectorMetric:
    """Blockwise infinity-norm distances between disturbance vectors."""

    block_dims: tuple

    def __post_init__(self):
        object.__setattr__(self, "block_dims", tuple(int(d) for d in self.block_dims))

    @property
    def size(self) -> int:
        return sum(self.block_dims)

    def __call__(self, w1, w2) -> np.ndarray:
        w1 = np.asarray(w1, dtype=float)
        w2 = np.asarray(w2, dtype=float)
        diff = np.abs(w1 - w2)
        out = []
        start = 0
        for d in self.block_dims:
            blk = diff[..., start:start + d]
            out.append(np.max(blk, axis=-1) if d else np.zeros(diff.shape[:-1]))
            start += d
        if not out:
            return np.zeros(diff.shape[:-1] + (0,))
        return np.stack(out, axis=-1)


class FiniteMetricSystem:
    """Finite metric system with a set-valued transition map.

    ``transitions`` maps ``(state, input, disturbance)`` index triples to
    iterables of successor indices. States with no outgoing transition at
    all are *frontier* states: they may appear as successors but are not
    expanded by the checker. ``blocks`` records the per-neighbour split of
    the disturbance vector.
    """

    def __init__(self, states, inputs, disturbances, transitions, tau: float,
                 blocks: Optional[Sequence[int]] = None, state_blocks: Optional[Sequence[int]] = None):
        self.states = np.atleast_2d(np.asarray(states, dtype=float))
        self.inputs = np.atleast_2d(np.asarray(inputs, dtype=float))
        dist = np.asarray(disturbances, dtype=float)
        self.disturbances = dist.reshape(len(dist), -1) if dist.ndim < 2 else dist
        if len(self.disturbances) == 0:
            raise ValueError("need at least one disturbance value ({0} when undisturbed)")
        self.tau = float(tau)
        p = self.disturbances.shape[1]
        self.metric_e = VectorMetric(tuple(blocks) if blocks is not None else ((p,) if p else ()))
        if self.metric_e.size != p:
            raise ValueError("disturbance blocks do not add up to the disturbance dimension")
        self.state_blocks = tuple(state_blocks) if state_blocks is not None else (self.states.shape[1],)
        if isinstance(transitions, Mapping):
            rows = [(s, u, w, t) for (s, u, w), tgts in transitions.items() for t in sorted(set(tgts))]
            arr = np.array(rows, dtype=np.int64).reshape(-1, 4)
        else:
            arr = np.asarray(transitions, dtype=np.int64).reshape(-1, 4)
        n = len(self.states)
        if arr.size:
            if arr[:, 3].min() < 0 or arr[:, 3].max() >= n:
                raise ValueError("transition target outside the state set")
            if arr[:, 0].min() < 0 or arr[:, 0].max() >= n:
                raise ValueError("transition source outside the state set")
            if arr[:, 1].max() >= len(self.inputs) or arr[:, 2].max() >= len(self.disturbances):
                raise ValueError("transition label outside the input/disturbance sets")
            arr = np.unique(arr, axis=0)
        self._rows = arr
        self._start = np.searchsorted(arr[:, 0], np.arange(n + 1)) if arr.size else np.zeros(n + 1, dtype=np.int64)

    @property
    def n_states(self) -> int:
        return len(self.states)

    @property
    def n_inputs(self) -> int:
        return len(self.inputs)

    @property
    def n_disturbances(self) -> int:
        return len(self.disturbances)

    @property
    def n_transitions(self) -> int:
        return len(self._rows)

    def expanded(self, s: int) -> bool:
        return bool(self._start[s + 1] > self._start[s])

    def outgoing(self, s: int) -> np.ndarray:
        """``(input, disturbance, target)`` rows leaving ``s``."""
        return self._rows[self._start[s]:self._start[s + 1], 1:]

    def successors(self, s: int, u: int, w: int) -> frozenset:
        rows = self.outgoing(s)
        sel = (rows[:, 0] == u) & (rows[:, 1] == w)
        return frozenset(int(t) for t in rows[sel, 2])

    def transition_dict(self) -> dict:
        out = {}
        for s, u, w, t in self._rows:
            out.setdefault((int(s), int(u), int(w)), set()).add(int(t))
        return {k: frozenset(v) for k, v in out.items()}

    def distance(self, a: int, b: int) -> float:
        return float(np.max(np.abs(self.states[a] - self.states[b]))) if self.states.shape[1] else 0.0


@dataclass(frozen=True)
class Relation:
    """Set of ``(state of S1, state of S2)`` index pairs."""

    pairs: frozenset
    n1: int
    n2: int

    def __post_init__(self):
        pairs = frozenset((int(a), int(b)) for a, b in self.pairs)
        for a, b in pairs:
            if not (0 <= a < self.n1 and 0 <= b < self.n2):
                raise ValueError(f"pair ({a}, {b}) outside the state sets")
        object.__setattr__(self, "pairs", pairs)

    @classmethod
    def from_matrix(cls, M) -> "Relation":
        M = np.asarray(M, dtype=bool)
        return cls(frozenset(zip(*np.nonzero(M))), M.shape[0], M.shape[1])

    @classmethod
    def from_predicate(cls, S1: FiniteMetricSystem, S2: FiniteMetricSystem, pred) -> "Relation":
        M = np.array([[bool(pred(x1, x2)) for x2 in S2.states] for x1 in S1.states], dtype=bool)
        return cls.from_matrix(M)

    def matrix(self) -> np.ndarray:
        M = np.zeros((self.n1, self.n2), dtype=bool)
        if self.pairs:
            a, b = zip(*self.pairs)
            M[list(a), list(b)] = True
        return M

    def __contains__(self, pair):
        return tuple(pair) in self.pairs

    def __len__(self):
        return len(self.pairs)


@dataclass
class BisimulationReport:
    holds: bool
    witnesses: list = field(default_factory=list)
    warning: Optional[str] = None
    pairs_checked: int = 0
    pairs_unexpanded: int = 0

    def __bool__(self):
        return self.holds


def _dense_successors(S: FiniteMetricSystem, s: int) -> np.ndarray:
    T = np.zeros((S.n_inputs, S.n_disturbances, S.n_states), dtype=bool)
    rows = S.outgoing(s)
    T[rows[:, 0], rows[:, 1], rows[:, 2]] = True
    return T


def _bad_given_first(S: FiniteMetricSystem, s: int, notR: np.ndarray) -> np.ndarray:
    # bad[u, w, t2] = some successor of (s, u, w) is unrelated to t2
    bad = np.zeros((S.n_inputs, S.n_disturbances, notR.shape[1]), dtype=bool)
    rows = S.outgoing(s)
    if len(rows):
        np.logical_or.at(bad, (rows[:, 0], rows[:, 1]), notR[rows[:, 2]])
    return bad


def check_disturbance_bisimulation(S1: FiniteMetricSystem, S2: FiniteMetricSystem, R: Relation, eps: float,
                                   eps_tilde, e: Optional[VectorMetric] = None,
                                   max_witnesses: int = 20) -> BisimulationReport:
    """Exhaustively check the three disturbance-bisimulation conditions.

    For every related pair: (a) the states are ``eps``-close; (b) every input
    of S1 is matched by some input of S2 such that, for all disturbance pairs
    whose blockwise mismatch is within ``eps_tilde``, every pair of successors
    is related; (c) the same with the roles of the inputs swapped.
    Pairs involving a frontier state are checked for (a) only.
    """
    if S1.states.shape[1] != S2.states.shape[1]:
        raise ValueError("state dimensions differ")
    e = e or S1.metric_e
    eps_tilde = np.atleast_1d(np.asarray(eps_tilde, dtype=float))
    if eps_tilde.size != len(e.block_dims):
        raise ValueError("eps_tilde length does not match the number of disturbance blocks")
    if S1.disturbances.shape[1] != e.size or S2.disturbances.shape[1] != e.size:
        raise ValueError("disturbance vectors are not decomposable by the vector metric")
    if (R.n1, R.n2) != (S1.n_states, S2.n_states):
        raise ValueError("relation does not match the systems")
    report = BisimulationReport(True)
    if not R.pairs:
        report.warning = "empty relation: conditions hold vacuously"
        log.warning(report.warning)
        return report

    mism = e(S1.disturbances[:, None, :], S2.disturbances[None, :, :])
    compat = np.all(mism <= eps_tilde + _TOL, axis=-1)  # (nw1, nw2)
    notR = ~R.matrix()
    cache2 = {}

    def witness(kind, x1, x2, **extra):
        report.holds = False
        if len(report.witnesses) < max_witnesses:
            report.witnesses.append({"condition": kind, "pair": (x1, x2), **extra})

    for x1, x2 in sorted(R.pairs):
        report.pairs_checked += 1
        d = float(np.max(np.abs(S1.states[x1] - S2.states[x2]))) if S1.states.shape[1] else 0.0
        if d > eps + _TOL:
            witness("a", x1, x2, distance=d, prefix="d(x1, x2) <= eps")
        if not (S1.expanded(x1) and S2.expanded(x2)):
            report.pairs_unexpanded += 1
            continue
        bad1 = _bad_given_first(S1, x1, notR)  # (nu1, nw1, n2)
        if x2 not in cache2:
            cache2[x2] = _dense_successors(S2, x2)
        T2 = cache2[x2]  # (nu2, nw2, n2)
        nu1, nw1 = bad1.shape[:2]
        nu2, nw2 = T2.shape[:2]
        viol = (bad1.reshape(nu1 * nw1, -1).astype(np.float32) @ T2.reshape(nu2 * nw2, -1).T.astype(np.float32)) > 0
        viol = viol.reshape(nu1, nw1, nu2, nw2) & compat[None, :, None, :]
        bad = viol.any(axis=(1, 3))  # bad[mu1, mu2]
        for mu1 in np.nonzero(bad.all(axis=1))[0]:
            witness("b", x1, x2, input=int(mu1), prefix="forall mu1 exists mu2 forall nu1, nu2 with e <= eps_tilde")
        for mu2 in np.nonzero(bad.all(axis=0))[0]:
            witness("c", x1, x2, input=int(mu2), prefix="forall mu2 exists mu1 forall nu1, nu2 with e <= eps_tilde")
    return report


def _product_indices(sizes: Sequence[int]):
    return list(itertools.product(*[range(n) for n in sizes]))


def compose(systems: Mapping, subset: Iterable, topology: NetworkTopology) -> FiniteMetricSystem:
    """Composition of the subsystems in ``subset``.

    Coupling disturbances are wired from the co-composed states at the start
    of the step; the external disturbance is the product of the states of
    the neighbours outside the subset. Disturbance values of every member
    must equal the product of its neighbours' state lists, in topology order.
    """
    members = topology.order(subset)
    if not members:
        raise ValueError("empty subset")
    taus = {float(systems[i].tau) for i in members}
    if len(taus) != 1:
        raise ValueError(f"mismatched sampling periods {sorted(taus)}")
    tau = taus.pop()
    for i in members:
        nb = topology.neighbors(i)
        missing = [j for j in nb if j not in systems]
        if missing:
            raise ValueError(f"neighbours {missing} of {i!r} are not provided")
        if nb:
            expect = np.array([np.concatenate([systems[j].states[k] for j, k in zip(nb, combo)])
                               for combo in _product_indices([systems[j].n_states for j in nb])])
        else:
            expect = np.zeros((1, 0))
        got = systems[i].disturbances
        if expect.shape != got.shape or not np.allclose(expect, got, rtol=0, atol=1e-12):
            raise ValueError(f"disturbance space of {i!r} is not the product of its neighbours' state spaces")
    ext = topology.subset_neighbors(members)
    sizes = [systems[i].n_states for i in members]
    in_sizes = [systems[i].n_inputs for i in members]
    ext_sizes = [systems[j].n_states for j in ext]
    state_combos = _product_indices(sizes)
    input_combos = _product_indices(in_sizes)
    ext_combos = _product_indices(ext_sizes) if ext else [()]
    states = np.array([np.concatenate([systems[i].states[k] for i, k in zip(members, c)]) for c in state_combos])
    inputs = np.array([np.concatenate([systems[i].inputs[k] for i, k in zip(members, c)]) for c in input_combos])
    if ext:
        dists = np.array([np.concatenate([systems[j].states[k] for j, k in zip(ext, c)]) for c in ext_combos])
    else:
        dists = np.zeros((1, 0))
    pos = {i: a for a, i in enumerate(members)}
    ext_pos = {j: a for a, j in enumerate(ext)}
    tdicts = [systems[i].transition_dict() for i in members]
    rows = []
    for si, sc in enumerate(state_combos):
        for ui, uc in enumerate(input_combos):
            for wi, wc in enumerate(ext_combos):
                parts = []
                for a, i in enumerate(members):
                    nb = topology.neighbors(i)
                    idx = tuple(sc[pos[j]] if j in pos else wc[ext_pos[j]] for j in nb)
                    widx = int(np.ravel_multi_index(idx, [systems[j].n_states for j in nb])) if nb else 0
                    parts.append(tdicts[a].get((sc[a], uc[a], widx), frozenset()))
                    if not parts[-1]:
                        break
                else:
                    for tc in itertools.product(*[sorted(p) for p in parts]):
                        rows.append((si, ui, wi, int(np.ravel_multi_index(tc, sizes))))
    blocks = [systems[j].states.shape[1] for j in ext]
    state_blocks = [systems[i].states.shape[1] for i in members]
    return FiniteMetricSystem(states, inputs, dists, np.array(rows, dtype=np.int64).reshape(-1, 4), tau,
                              blocks=blocks, state_blocks=state_blocks)


def product_relation(relations: Mapping, subset: Iterable, eps: Mapping, topology: NetworkTopology):
    """Componentwise product of local relations over ``subset``.

    Returns the relation together with the composed precision (the maximum
    of the local ones) and the stacked precisions of the external neighbours.
    Composed state indices follow :func:`compose` (row-major, topology order).
    """
    members = topology.order(subset)
    rels = [relations[i] for i in members]
    n1 = [r.n1 for r in rels]
    n2 = [r.n2 for r in rels]
    pairs = set()
    for combo in itertools.product(*[sorted(r.pairs) for r in rels]):
        a = int(np.ravel_multi_index([p[0] for p in combo], n1))
        b = int(np.ravel_multi_index([p[1] for p in combo], n2))
        pairs.add((a, b))
    R = Relation(frozenset(pairs), int(np.prod(n1)), int(np.prod(n2)))
    eps_c = max(float(eps[i]) for i in members)
    eps_t = np.array([float(eps[j]) for j in topology.subset_neighbors(members)], dtype=float)
    return R, eps_c, eps_t
