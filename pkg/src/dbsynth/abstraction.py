"""Uniform grids, grid-based abstractions and the Lyapunov sublevel relation."""

from __future__ import annotations

import hashlib
import itertools
import json
import logging
import struct
from concurrent.futures import ThreadPoolExecutor
from dataclasses import dataclass
from typing import Mapping, Optional, Sequence

import numpy as np

from .lyapunov import AbstractionParams, LyapunovSpec
from .metric import FiniteMetricSystem, NetworkTopology
from .ode import Box, VectorField, affine_endpoint_maps, integrate_rk4

log = logging.getLogger(__name__)
_REPORTED: set = set()

MAX_POINTS = 10**9
_EDGE_TOL = 1e-9

FLAG_OOD = 1
FLAG_EMPTY = 2


class CapacityError(ValueError):
    def __init__(self, count):
        super().__init__(f"grid would hold {count} points (limit {MAX_POINTS})")
        self.count = count


class EmptyGridError(ValueError):
    pass


class OutOfDomain(ValueError):
    pass


class UniformGrid:
    """Points ``2 k eta`` (integer ``k``) inside a box, indexed row-major.

    The grid covers ``[2 k_min eta - eta, 2 k_max eta + eta]``, which may be
    slightly smaller than the box when the bounds are not multiples of
    ``2 eta``.
    """

    def __init__(self, domain: Box, eta):
        eta = np.broadcast_to(np.asarray(eta, dtype=float), (domain.dim,)).copy()
        if np.any(eta <= 0):
            raise ValueError("eta must be positive")
        self.domain = domain
        self.eta = eta
        step = 2.0 * eta
        # nudge by a relative epsilon so bounds that are exact multiples survive rounding
        self.kmin = np.ceil(domain.lower / step - 1e-9).astype(np.int64)
        self.kmax = np.floor(domain.upper / step + 1e-9).astype(np.int64)
        counts = self.kmax - self.kmin + 1
        if np.any(counts <= 0):
            raise EmptyGridError(f"no lattice point of spacing {step} inside {domain.lower}..{domain.upper}")
        total = int(np.prod(counts.astype(object)))
        if total > MAX_POINTS:
            raise CapacityError(total)
        self.shape = tuple(int(c) for c in counts)
        self.size = total
        cov = self.covered()
        key = (tuple(np.round(self.eta, 12)), tuple(domain.lower), tuple(domain.upper))
        shrink = np.minimum(1e-12, (domain.upper - domain.lower) / 2)
        if not cov.contains_box(Box(domain.lower + shrink, domain.upper - shrink)) and key not in _REPORTED:
            _REPORTED.add(key)
            log.warning("grid with eta=%s covers only %s..%s of the domain %s..%s",
                        eta, cov.lower, cov.upper, domain.lower, domain.upper)

    @property
    def dim(self) -> int:
        return self.domain.dim

    @property
    def step(self) -> np.ndarray:
        return 2.0 * self.eta

    def axes(self):
        return [self.step[d] * np.arange(self.kmin[d], self.kmax[d] + 1) for d in range(self.dim)]

    def covered(self) -> Box:
        return Box(self.step * self.kmin - self.eta, self.step * self.kmax + self.eta)

    def points(self, idx=None) -> np.ndarray:
        """Coordinates of the points with flat indices ``idx`` (all by default)."""
        if idx is None:
            idx = np.arange(self.size)
        idx = np.asarray(idx, dtype=np.int64)
        sub = np.stack(np.unravel_index(idx, self.shape), axis=-1) if self.dim else np.zeros(idx.shape + (0,))
        return (sub + self.kmin) * self.step

    def point(self, i: int) -> np.ndarray:
        return self.points(np.array([i]))[0]

    def subs(self, idx) -> np.ndarray:
        return np.stack(np.unravel_index(np.asarray(idx, dtype=np.int64), self.shape), axis=-1)

    def flat(self, subs) -> np.ndarray:
        return np.ravel_multi_index(tuple(np.moveaxis(np.asarray(subs, dtype=np.int64), -1, 0)), self.shape)

    def quantize_many(self, x) -> np.ndarray:
        """Flat indices of the nearest points, ``-1`` outside the covered box.

        Ties are broken toward the negative side.
        """
        x = np.asarray(x, dtype=float)
        k = np.ceil(x / self.step - 0.5).astype(np.int64)
        inside = np.all((k >= self.kmin) & (k <= self.kmax), axis=-1)
        sub = np.clip(k - self.kmin, 0, np.array(self.shape) - 1)
        out = np.ravel_multi_index(tuple(np.moveaxis(sub, -1, 0)), self.shape)
        return np.where(inside, out, -1)

    def quantize(self, x) -> int:
        i = int(self.quantize_many(np.asarray(x, dtype=float)[None, :])[0])
        if i < 0:
            raise OutOfDomain(f"{np.asarray(x).tolist()} lies outside the grid cover {self.covered()}")
        return i

    def dequantize(self, i) -> np.ndarray:
        return self.points(i)

    def descriptor(self) -> dict:
        return {"lower": self.domain.lower.tolist(), "upper": self.domain.upper.tolist(),
                "eta": self.eta.tolist(), "kmin": self.kmin.tolist(), "shape": list(self.shape)}

    @classmethod
    def from_descriptor(cls, d) -> "UniformGrid":
        return cls(Box(d["lower"], d["upper"]), d["eta"])

    def digest(self) -> str:
        return hashlib.sha256(json.dumps(self.descriptor(), sort_keys=True).encode()).hexdigest()[:16]


def build_grid(domain: Box, eta) -> UniformGrid:
    return UniformGrid(domain, eta)


def quantize(grid: UniformGrid, x) -> int:
    return grid.quantize(x)


# --- disturbance models -------------------------------------------------------------

@dataclass
class NeighborBlock:
    source: object
    grid: UniformGrid
    coords: tuple
    eps: float


class NeighborGrids:
    """Product of neighbour state grids.

    Each block keeps the full neighbour grid (the block metric acts on whole
    neighbour states) and the coordinates that actually enter the vector
    field, so ``select`` maps stacked neighbour states to the field's ``w``.
    """

    def __init__(self, blocks: Sequence[NeighborBlock]):
        self.blocks = list(blocks)

    @property
    def dim_w(self) -> int:
        return sum(len(b.coords) for b in self.blocks)

    @property
    def block_dims(self) -> tuple:
        return tuple(b.grid.dim for b in self.blocks)

    def select(self, stacked) -> np.ndarray:
        stacked = np.asarray(stacked, dtype=float)
        parts, start = [], 0
        for b in self.blocks:
            parts.append(stacked[..., [start + c for c in b.coords]])
            start += b.grid.dim
        return np.concatenate(parts, axis=-1) if parts else np.zeros(stacked.shape[:-1] + (0,))

    def hull(self) -> Box:
        lo, hi = [], []
        for b in self.blocks:
            cov_lo = b.grid.kmin * b.grid.step
            cov_hi = b.grid.kmax * b.grid.step
            lo.extend(cov_lo[list(b.coords)])
            hi.extend(cov_hi[list(b.coords)])
        return Box(np.array(lo, dtype=float), np.array(hi, dtype=float))

    def points(self) -> np.ndarray:
        """Distinct ``w`` values generated by the model."""
        if not self.blocks:
            return np.zeros((1, 0))
        per = []
        for b in self.blocks:
            per.append(np.unique(b.grid.points()[:, list(b.coords)], axis=0))
        return np.array([np.concatenate(c) for c in itertools.product(*per)])

    def quantize(self, stacked) -> np.ndarray:
        """Replace each neighbour block by its nearest grid point."""
        stacked = np.asarray(stacked, dtype=float)
        out, start = [], 0
        for b in self.blocks:
            blk = stacked[..., start:start + b.grid.dim]
            idx = b.grid.quantize_many(blk)
            if np.any(idx < 0):
                raise OutOfDomain(f"neighbour {b.source!r} state outside its grid")
            out.append(b.grid.points(idx))
            start += b.grid.dim
        return np.concatenate(out, axis=-1) if out else np.zeros(stacked.shape[:-1] + (0,))


class ExplicitDisturbances:
    """Finite list of disturbance values."""

    def __init__(self, points):
        pts = np.asarray(points, dtype=float)
        self._points = pts.reshape(len(pts), -1) if pts.ndim < 2 else pts

    @property
    def dim_w(self) -> int:
        return self._points.shape[1]

    def hull(self) -> Box:
        if self.dim_w == 0:
            return Box(np.zeros(0), np.zeros(0))
        return Box(self._points.min(axis=0), self._points.max(axis=0))

    def points(self) -> np.ndarray:
        return self._points


def neighbor_disturbance_model(topology: NetworkTopology, i, grids: Mapping, eps: Mapping,
                               coords: Optional[Mapping] = None) -> NeighborGrids:
    """Disturbance model of ``i`` built from its neighbours' grids.

    ``coords`` maps a neighbour id to the coordinates of its state feeding
    ``i`` (all of them by default).
    """
    blocks = []
    for j in topology.neighbors(i):
        g = grids[j]
        if np.any(g.eta > eps[j] + 1e-15):
            raise ValueError(f"neighbour {j!r}: eta {g.eta.tolist()} exceeds eps {eps[j]}")
        sel = tuple(coords[j]) if coords and j in coords else tuple(range(g.dim))
        if any(c < 0 or c >= g.dim for c in sel):
            raise ValueError(f"coordinate selector {sel} invalid for neighbour {j!r}")
        blocks.append(NeighborBlock(j, g, sel, float(eps[j])))
    return NeighborGrids(blocks)


# --- abstraction ----------------------------------------------------------------------

class AbstractSystem:
    """Grid abstraction of a sampled control system.

    Box mode stores, for each (state, input), inclusive per-dimension grid
    index bounds ``lo``/``hi`` of all successors over every disturbance value,
    plus flags (``FLAG_OOD`` when an endpoint ball may leave the domain).
    Exact mode stores explicit ``(state, input, disturbance, target)`` rows
    and per-(state, input, disturbance) flags.
    """

    def __init__(self, state_grid: UniformGrid, input_grid: UniformGrid, tau: float, mode: str,
                 lo=None, hi=None, flags=None, rows=None, exact_flags=None, disturbances=None,
                 params: Optional[AbstractionParams] = None, meta: Optional[dict] = None):
        self.state_grid = state_grid
        self.input_grid = input_grid
        self.tau = float(tau)
        self.mode = mode
        self.lo, self.hi, self.flags = lo, hi, flags
        self.rows, self.exact_flags = rows, exact_flags
        self.disturbances = disturbances
        self.params = params
        self.meta = dict(meta or {})
        self._sat = None
        if mode == "exact":
            order = np.lexsort((rows[:, 2], rows[:, 1], rows[:, 0])) if len(rows) else np.zeros(0, dtype=int)
            self.rows = rows[order]
            key = self.rows[:, 0] * self.n_inputs + self.rows[:, 1]
            self._start = np.searchsorted(key, np.arange(self.n_states * self.n_inputs + 1))
            self.flags = (np.bitwise_or.reduce(exact_flags, axis=2) if exact_flags.shape[2]
                          else np.zeros(exact_flags.shape[:2], np.uint8)).astype(np.uint8)
        elif mode != "box":
            raise ValueError(f"unknown abstraction mode {mode!r}")

    @property
    def n_states(self) -> int:
        return self.state_grid.size

    @property
    def n_inputs(self) -> int:
        return self.input_grid.size

    @property
    def dim(self) -> int:
        return self.state_grid.dim

    def blocked(self) -> np.ndarray:
        """(state, input) pairs that may leave the domain or have no successor."""
        return self.flags != 0

    def successors(self, s: int, u: int, w: Optional[int] = None) -> np.ndarray:
        if self.mode == "box":
            if w is not None:
                raise ValueError("box mode does not resolve individual disturbances")
            lo, hi = self.lo[s, u], self.hi[s, u]
            if np.any(lo > hi):
                return np.zeros(0, dtype=np.int64)
            axes = [np.arange(a, b + 1) for a, b in zip(lo, hi)]
            sub = np.array(list(itertools.product(*axes)), dtype=np.int64)
            return self.state_grid.flat(sub)
        k = s * self.n_inputs + u
        rows = self.rows[self._start[k]:self._start[k + 1]]
        if w is not None:
            rows = rows[rows[:, 2] == w]
        return np.unique(rows[:, 3])

    def controllable(self, Z: np.ndarray) -> np.ndarray:
        """``ok[s, u]``: every successor of ``(s, u)`` lies in ``Z`` and no flag is set."""
        Z = np.asarray(Z, dtype=bool)
        if self.mode == "box":
            if self._sat is None:
                self._sat = _box_corners(self.state_grid.shape, self.lo, self.hi, self.flags == 0)
            return _box_inside(self.state_grid.shape, Z, self._sat)
        bad = np.zeros(self.n_states * self.n_inputs, dtype=bool)
        if len(self.rows):
            np.logical_or.at(bad, self.rows[:, 0] * self.n_inputs + self.rows[:, 1], ~Z[self.rows[:, 3]])
        return ~bad.reshape(self.n_states, self.n_inputs) & (self.flags == 0)

    def to_metric_system(self) -> FiniteMetricSystem:
        """Exact-mode abstraction as an explicit finite metric system."""
        if self.mode != "exact":
            raise ValueError("only exact-mode abstractions resolve disturbances")
        return FiniteMetricSystem(self.state_grid.points(), self.input_grid.points(), self.disturbances,
                                  self.rows, self.tau, blocks=self.meta.get("blocks"))

    def digest(self) -> str:
        h = hashlib.sha256()
        for arr in (self.lo, self.hi, self.flags, self.rows):
            if arr is not None:
                h.update(np.ascontiguousarray(arr).tobytes())
        return h.hexdigest()


def _box_corners(shape, lo, hi, usable):
    """Signed flat corner indices into a padded summed-area table, per box."""
    d = len(shape)
    padded = tuple(n + 1 for n in shape)
    lo = lo.astype(np.int64)
    hi = hi.astype(np.int64)
    corners = []
    for corner in itertools.product((0, 1), repeat=d):
        sub = tuple(np.where(c, hi[..., a] + 1, lo[..., a]) for a, c in enumerate(corner))
        sub = tuple(np.clip(x, 0, padded[a] - 1) for a, x in enumerate(sub))
        corners.append((np.ravel_multi_index(sub, padded), (-1) ** (d - sum(corner))))
    count = np.prod(hi - lo + 1, axis=-1)
    return corners, count, usable & np.all(hi >= lo, axis=-1)


def _box_inside(shape, Z, sat) -> np.ndarray:
    """Whether every grid point in each box lies in ``Z`` (summed-area table)."""
    corners, count, usable = sat
    S = np.asarray(Z, dtype=np.int64).reshape(shape)
    for ax in range(len(shape)):
        S = np.cumsum(S, axis=ax)
    S = np.pad(S, [(1, 0)] * len(shape)).ravel()
    total = np.zeros(count.shape, dtype=np.int64)
    for idx, sign in corners:
        if sign > 0:
            total += S[idx]
        else:
            total -= S[idx]
    return (total == count) & usable


def _box_bounds(grid: UniformGrid, domain: Box, lower, upper):
    """Grid index bounds of points inside ``[lower, upper]`` plus flags."""
    step = grid.step
    klo = np.ceil((lower - _EDGE_TOL) / step).astype(np.int64) - grid.kmin
    khi = np.floor((upper + _EDGE_TOL) / step).astype(np.int64) - grid.kmin
    ood = np.any((lower < domain.lower - _EDGE_TOL) | (upper > domain.upper + _EDGE_TOL), axis=-1)
    size = np.array(grid.shape)
    klo = np.clip(klo, 0, size - 1)
    khi = np.clip(khi, 0, size - 1)
    flags = np.where(ood, FLAG_OOD, 0).astype(np.uint8)
    empty = np.any(klo > khi, axis=-1) | np.any(np.ceil((lower - _EDGE_TOL) / step) > np.floor((upper + _EDGE_TOL) / step), axis=-1)
    flags |= np.where(empty, FLAG_EMPTY, 0).astype(np.uint8)
    return klo.astype(np.int32), khi.astype(np.int32), flags


def build_abstraction(field: VectorField, params: AbstractionParams, state_domain: Box, input_domain: Box,
                      disturbance_model=None, mode: str = "box", h: Optional[float] = None,
                      threads: int = 1) -> AbstractSystem:
    """Abstract a vector field on uniform state and input grids.

    ``box`` mode (affine fields) encloses the endpoints for all disturbance
    values in the model by an interval hull; ``exact`` mode integrates every
    (state, input, disturbance) triple with RK4 and keeps the grid points
    within ``eta`` of the endpoint.
    """
    sgrid = build_grid(state_domain, params.eta)
    igrid = build_grid(input_domain, params.omega) if input_domain.dim else None
    if igrid is None:
        raise ValueError("an input domain is required")
    dist = disturbance_model if disturbance_model is not None else ExplicitDisturbances(np.zeros((1, field.dim_w)))
    if dist.dim_w != field.dim_w:
        raise ValueError(f"disturbance model provides {dist.dim_w} components, field expects {field.dim_w}")
    X = sgrid.points()
    U = igrid.points()
    meta = {"state_domain": [state_domain.lower.tolist(), state_domain.upper.tolist()],
            "input_domain": [input_domain.lower.tolist(), input_domain.upper.tolist()]}
    if isinstance(dist, NeighborGrids):
        meta["blocks"] = list(dist.block_dims)

    if mode == "box":
        if not field.is_affine:
            raise ValueError("box mode needs an affine vector field")
        maps = affine_endpoint_maps(field, params.tau)
        wbox = dist.hull()
        wc = wbox.center if wbox.dim else np.zeros(0)
        rho = np.abs(maps.P) @ wbox.radius if wbox.dim else np.zeros(sgrid.dim)
        ucontrib = U @ maps.N.T if maps.N.shape[1] else np.zeros((len(U), sgrid.dim))
        wcontrib = maps.P @ wc if wbox.dim else np.zeros(sgrid.dim)
        lo = np.empty((sgrid.size, igrid.size, sgrid.dim), dtype=np.int32)
        hi = np.empty_like(lo)
        flags = np.empty((sgrid.size, igrid.size), dtype=np.uint8)
        eta = sgrid.eta

        def work(a, b):
            c = (X[a:b] @ maps.M.T)[:, None, :] + ucontrib[None, :, :] + wcontrib
            lo[a:b], hi[a:b], flags[a:b] = _box_bounds(sgrid, state_domain, c - rho - eta, c + rho + eta)

        chunk = max(1, 2_000_000 // max(1, igrid.size * sgrid.dim))
        spans = [(a, min(a + chunk, sgrid.size)) for a in range(0, sgrid.size, chunk)]
        if threads > 1:
            with ThreadPoolExecutor(threads) as pool:
                list(pool.map(lambda ab: work(*ab), spans))
        else:
            for ab in spans:
                work(*ab)
        meta.update({"rho": rho.tolist(), "w_center": wc.tolist(),
                     "w_lower": wbox.lower.tolist(), "w_upper": wbox.upper.tolist()})
        return AbstractSystem(sgrid, igrid, params.tau, "box", lo=lo, hi=hi, flags=flags,
                              params=params, meta=meta)

    if mode == "exact":
        W = dist.points()
        n_s, n_u, n_w = sgrid.size, igrid.size, len(W)
        if n_s * n_u * n_w > 5_000_000:
            raise ValueError(f"exact mode would integrate {n_s * n_u * n_w} triples; use box mode")
        xs = np.repeat(X, n_u * n_w, axis=0)
        us = np.tile(np.repeat(U, n_w, axis=0), (n_s, 1))
        ws = np.tile(W, (n_s * n_u, 1))
        ends = integrate_rk4(field, xs, us, ws, params.tau, h)
        eta = sgrid.eta
        klo, khi, fl = _box_bounds(sgrid, state_domain, ends - eta, ends + eta)
        live = (fl & FLAG_EMPTY) == 0
        ext = (khi[live] - klo[live]).max(axis=0) if live.any() else np.zeros(sgrid.dim, dtype=np.int64)
        ts, tgs = [], []
        for off in itertools.product(*[range(int(e) + 1) for e in ext]):
            idx = klo + np.array(off, dtype=np.int64)
            t = np.nonzero(live & np.all(idx <= khi, axis=1))[0]
            ts.append(t)
            tgs.append(sgrid.flat(idx[t]))
        t = np.concatenate(ts)
        tg = np.concatenate(tgs)
        s, rem = np.divmod(t, n_u * n_w)
        u, w = np.divmod(rem, n_w)
        order = np.lexsort((tg, w, u, s))
        rows = np.stack([s, u, w, tg], axis=1)[order].astype(np.int64)
        return AbstractSystem(sgrid, igrid, params.tau, "exact", rows=rows,
                              exact_flags=fl.reshape(n_s, n_u, n_w), disturbances=W, params=params, meta=meta)
    raise ValueError(f"unknown abstraction mode {mode!r}")


def sampled_system(field: VectorField, points, inputs, disturbances, tau: float, h: Optional[float] = None,
                   blocks=None) -> FiniteMetricSystem:
    """Sampled-time system restricted to finitely many source states.

    Source states are ``points``; each transition leads to the RK4 endpoint,
    which is added as a *frontier* state without outgoing transitions.
    """
    P = np.asarray(points, dtype=float)
    U = np.asarray(inputs, dtype=float)
    W = np.asarray(disturbances, dtype=float).reshape(len(disturbances), -1)
    n_s, n_u, n_w = len(P), len(U), len(W)
    xs = np.repeat(P, n_u * n_w, axis=0)
    us = np.tile(np.repeat(U, n_w, axis=0), (n_s, 1))
    ws = np.tile(W, (n_s * n_u, 1))
    ends = integrate_rk4(field, xs, us, ws, tau, h)
    states = np.vstack([P, ends])
    t = np.arange(len(ends))
    s, rem = np.divmod(t, n_u * n_w)
    u, w = np.divmod(rem, n_w)
    rows = np.stack([s, u, w, n_s + t], axis=1)
    return FiniteMetricSystem(states, U, W, rows, tau, blocks=blocks)


# --- relation ------------------------------------------------------------------------

class LyapunovRelation:
    """Sublevel relation ``V(q, q_hat) <= alpha_low(eps)``.

    ``V`` defaults to ``sqrt((q - q_hat)^T P (q - q_hat))``; any callable
    acting on the last axis can be supplied instead.
    """

    def __init__(self, spec: LyapunovSpec, eps: float, P=None, V=None, rtol: float = 1e-12):
        if (P is None) == (V is None):
            raise ValueError("give exactly one of P or V")
        self.spec = spec
        self.eps = float(eps)
        self.P = None if P is None else np.atleast_2d(np.asarray(P, dtype=float))
        self._V = V
        self.rtol = rtol

    @property
    def threshold(self) -> float:
        return float(self.spec.alpha_low(self.eps))

    def V(self, q, q_hat):
        if self._V is not None:
            return self._V(np.asarray(q, dtype=float), np.asarray(q_hat, dtype=float))
        d = np.asarray(q, dtype=float) - np.asarray(q_hat, dtype=float)
        val = np.sqrt(np.maximum(np.einsum("...i,ij,...j->...", d, self.P, d), 0.0))
        return float(val) if np.ndim(val) == 0 else val

    def contains(self, q, q_hat):
        return np.asarray(self.V(q, q_hat)) <= self.threshold * (1.0 + self.rtol)

    def closest(self, grid: UniformGrid, x, lo, hi) -> int:
        """Grid point in the index box ``[lo, hi]`` minimising ``V(x, .)``."""
        x = np.asarray(x, dtype=float)
        if self.P is not None and np.allclose(self.P, np.diag(np.diag(self.P))):
            k = np.ceil(x / grid.step - 0.5).astype(np.int64) - grid.kmin
            return int(grid.flat(np.clip(k, lo, hi)))
        axes = [np.arange(a, b + 1) for a, b in zip(lo, hi)]
        cand = grid.flat(np.array(list(itertools.product(*axes)), dtype=np.int64))
        vals = self.V(x[None, :], grid.points(cand))
        return int(cand[int(np.argmin(vals))])


def relation_membership(rel: LyapunovRelation, q, q_hat) -> bool:
    return bool(rel.contains(q, q_hat))


# --- persistence ---------------------------------------------------------------------

MAGIC = b"SYMABST1"
VERSION = 1


def _pack_bits(mask) -> bytes:
    return np.packbits(np.asarray(mask, dtype=bool).ravel(), bitorder="little").tobytes()


def save_abstraction(path, abs_: AbstractSystem, bitsets: Optional[Mapping] = None) -> None:
    """Write a box-mode abstraction.

    Layout: 8-byte magic, little-endian u32 version, u32 header length, UTF-8
    JSON header, then ``lo`` and ``hi`` as int32 arrays of shape
    ``(n_states, n_inputs, dim)``, ``flags`` as uint8 ``(n_states, n_inputs)``,
    then each named bitset packed little-endian, in header order.
    """
    if abs_.mode != "box":
        raise ValueError("only box-mode abstractions are persisted")
    bitsets = dict(bitsets or {})
    header = {
        "version": VERSION,
        "state_grid": abs_.state_grid.descriptor(),
        "input_grid": abs_.input_grid.descriptor(),
        "tau": abs_.tau,
        "params": abs_.params.to_dict() if abs_.params else None,
        "meta": abs_.meta,
        "bitsets": [{"name": k, "bits": int(np.asarray(v).size)} for k, v in bitsets.items()],
    }
    hb = json.dumps(header, sort_keys=True, allow_nan=True).encode()
    with open(path, "wb") as fh:
        fh.write(MAGIC)
        fh.write(struct.pack("<II", VERSION, len(hb)))
        fh.write(hb)
        fh.write(np.ascontiguousarray(abs_.lo, dtype="<i4").tobytes())
        fh.write(np.ascontiguousarray(abs_.hi, dtype="<i4").tobytes())
        fh.write(np.ascontiguousarray(abs_.flags, dtype=np.uint8).tobytes())
        for v in bitsets.values():
            fh.write(_pack_bits(v))


def load_abstraction(path):
    """Inverse of :func:`save_abstraction`; returns ``(abstraction, bitsets)``."""
    with open(path, "rb") as fh:
        data = fh.read()
    if data[:8] != MAGIC:
        raise ValueError(f"{path}: not an abstraction file")
    version, hlen = struct.unpack("<II", data[8:16])
    if version != VERSION:
        raise ValueError(f"{path}: unsupported version {version}")
    header = json.loads(data[16:16 + hlen])
    sg = UniformGrid.from_descriptor(header["state_grid"])
    ig = UniformGrid.from_descriptor(header["input_grid"])
    n = sg.size * ig.size
    off = 16 + hlen
    lo = np.frombuffer(data, "<i4", n * sg.dim, off).reshape(sg.size, ig.size, sg.dim).astype(np.int32)
    off += 4 * n * sg.dim
    hi = np.frombuffer(data, "<i4", n * sg.dim, off).reshape(sg.size, ig.size, sg.dim).astype(np.int32)
    off += 4 * n * sg.dim
    flags = np.frombuffer(data, np.uint8, n, off).reshape(sg.size, ig.size).copy()
    off += n
    bitsets = {}
    for entry in header["bitsets"]:
        nbytes = (entry["bits"] + 7) // 8
        raw = np.frombuffer(data, np.uint8, nbytes, off)
        bitsets[entry["name"]] = np.unpackbits(raw, bitorder="little")[:entry["bits"]].astype(bool)
        off += nbytes
    if off != len(data):
        raise ValueError(f"{path}: {len(data) - off} trailing bytes")
    params = AbstractionParams.from_dict(header["params"]) if header["params"] else None
    abs_ = AbstractSystem(sg, ig, header["tau"], "box", lo=lo, hi=hi, flags=flags, params=params,
                          meta=header["meta"])
    return abs_, bitsets
