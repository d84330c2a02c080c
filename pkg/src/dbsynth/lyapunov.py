"""Incremental ISS Lyapunov data, quantisation bounds and small-gain tests."""

from __future__ import annotations

import math
from dataclasses import dataclass, field
from typing import Dict, Mapping, Optional

import numpy as np
from scipy.optimize import linprog
from scipy.sparse.csgraph import connected_components

from .metric import NetworkTopology

NORMS = ("inf", "euclid")


class InfeasibleError(ValueError):
    """Parameter choice violates a feasibility bracket.

    ``bracket`` is the (non-positive) value of the bracket that failed and
    ``terms`` holds the individual contributions.
    """

    def __init__(self, message, bracket=float("nan"), terms=None, subsystem=None):
        super().__init__(message)
        self.bracket = bracket
        self.terms = dict(terms or {})
        self.subsystem = subsystem


@dataclass(frozen=True)
class KInf:
    """Gain ``r -> c * r**p`` (``p == 1`` is the linear form).

    ``c == 0`` is accepted as the zero gain, used for absent coupling terms;
    it is not invertible.
    """

    c: float
    p: float = 1.0

    def __post_init__(self):
        if self.c < 0 or self.p <= 0:
            raise ValueError(f"invalid K-infinity gain c={self.c}, p={self.p}")

    @classmethod
    def linear(cls, c: float) -> "KInf":
        return cls(float(c), 1.0)

    @classmethod
    def power(cls, c: float, p: float) -> "KInf":
        return cls(float(c), float(p))

    @property
    def is_linear(self) -> bool:
        return self.p == 1.0

    def __call__(self, r):
        r = np.asarray(r, dtype=float)
        if np.any(r < 0):
            raise ValueError("K-infinity gains are defined on [0, inf)")
        out = self.c * r if self.p == 1.0 else self.c * r ** self.p
        return float(out) if out.ndim == 0 else out

    def inverse(self, y):
        if self.c == 0:
            raise ValueError("the zero gain has no inverse")
        y = np.asarray(y, dtype=float)
        out = y / self.c if self.p == 1.0 else (y / self.c) ** (1.0 / self.p)
        return float(out) if out.ndim == 0 else out

    def derivative(self, r: float) -> float:
        if self.p == 1.0:
            return self.c
        if r == 0 and self.p < 1:
            return math.inf
        return self.c * self.p * r ** (self.p - 1.0)

    def max_derivative(self, z: float) -> float:
        """Largest slope on ``[0, z]``."""
        if self.c == 0 or self.p == 1.0:
            return self.c
        if self.p < 1:
            return math.inf
        return self.derivative(z)

    def to_dict(self) -> dict:
        return {"c": self.c, "p": self.p}


def as_kinf(value) -> KInf:
    if isinstance(value, KInf):
        return value
    if isinstance(value, Mapping):
        return KInf(float(value["c"]), float(value.get("p", 1.0)))
    return KInf.linear(float(value))


@dataclass(frozen=True)
class LyapunovSpec:
    """Decay rate and comparison gains witnessing a delta-ISS Lyapunov function.

    ``c_alpha`` / ``c_sigma`` are the small-gain constants of the subsystem;
    by default ``c_alpha = 1`` and ``c_sigma`` is the slope of ``sigma_d``.
    """

    lam: float
    alpha_low: KInf
    alpha_high: KInf
    sigma_u: KInf
    sigma_d: KInf
    gamma: KInf
    c_alpha: float = 1.0
    c_sigma: Optional[float] = None

    def __post_init__(self):
        if self.lam <= 0:
            raise ValueError("decay rate must be positive")
        for name in ("alpha_low", "alpha_high", "sigma_u", "sigma_d", "gamma"):
            object.__setattr__(self, name, as_kinf(getattr(self, name)))
        r = np.logspace(-6, 6, 121)
        if np.any(self.alpha_low(r) > self.alpha_high(r) * (1 + 1e-12)):
            raise ValueError("alpha_low must not exceed alpha_high")
        if self.c_sigma is None:
            object.__setattr__(self, "c_sigma", self.sigma_d.max_derivative(1.0) if self.sigma_d.is_linear else 1.0)

    @classmethod
    def linear(cls, lam, alpha_low, alpha_high, sigma_u, sigma_d, gamma, **kw) -> "LyapunovSpec":
        return cls(float(lam), KInf.linear(alpha_low), KInf.linear(alpha_high), KInf.linear(sigma_u),
                   KInf.linear(sigma_d), KInf.linear(gamma), **kw)


@dataclass(frozen=True)
class AbstractionParams:
    tau: float
    eta: np.ndarray
    omega: float
    eps: float
    eps_tilde: np.ndarray
    convention: str = "inf"
    psi: float = 0.0
    eta_bound: float = math.nan

    def __post_init__(self):
        object.__setattr__(self, "eta", np.atleast_1d(np.asarray(self.eta, dtype=float)))
        object.__setattr__(self, "eps_tilde", np.atleast_1d(np.asarray(self.eps_tilde, dtype=float)))
        if self.convention not in NORMS:
            raise ValueError(f"unknown norm convention {self.convention!r}")
        if self.tau <= 0 or self.omega <= 0 or self.eps <= 0 or np.any(self.eta <= 0):
            raise ValueError("tau, eta, omega and eps must be strictly positive")
        if np.any(self.eps_tilde < 0):
            raise ValueError("eps_tilde entries must be nonnegative")
        if np.any(self.eta > self.eps):
            raise ValueError("state quantisation eta must not exceed eps")

    def to_dict(self) -> dict:
        return {
            "tau": self.tau, "eta": self.eta.tolist(), "omega": self.omega, "eps": self.eps,
            "eps_tilde": self.eps_tilde.tolist(), "convention": self.convention,
            "psi": self.psi, "eta_bound": self.eta_bound,
        }

    @classmethod
    def from_dict(cls, d) -> "AbstractionParams":
        return cls(d["tau"], d["eta"], d["omega"], d["eps"], d["eps_tilde"], d.get("convention", "inf"),
                   d.get("psi", 0.0), d.get("eta_bound", math.nan))


def vector_norm(v, convention: str = "inf") -> float:
    v = np.atleast_1d(np.asarray(v, dtype=float))
    if v.size == 0:
        return 0.0
    if convention == "inf":
        return float(np.max(np.abs(v)))
    if convention == "euclid":
        return float(np.linalg.norm(v))
    raise ValueError(f"unknown norm convention {convention!r}")


def tilde_eps(topology: NetworkTopology, i, eps_map: Mapping) -> np.ndarray:
    """Stack the precisions of the neighbours of ``i`` in topology order."""
    out = []
    for j in topology.neighbors(i, ordered=True):
        if j not in eps_map:
            raise KeyError(f"no precision given for neighbour {j!r} of {i!r}")
        out.append(float(eps_map[j]))
    return np.asarray(out, dtype=float)


def _bracket(spec: LyapunovSpec, eps, omega, eps_tilde, convention):
    et = vector_norm(eps_tilde, convention)
    terms = {
        "decay": spec.lam * spec.alpha_low(eps),
        "input": spec.sigma_u(omega),
        "disturbance": spec.sigma_d(et),
    }
    return terms


def max_eta(spec: LyapunovSpec, tau: float, eps: float, omega: float, eps_tilde, psi: float,
            convention: str = "inf") -> float:
    """Largest state quantisation keeping the Lyapunov sublevel relation a
    disturbance bisimulation.

    Returns ``min(gamma^-1((1 - e^{-lam tau})/lam * bracket), alpha_high^-1(alpha_low(eps)))``
    with ``bracket = lam alpha_low(eps) - sigma_u(omega) - sigma_d(|eps_tilde|) - psi tau``.
    """
    terms = _bracket(spec, eps, omega, eps_tilde, convention)
    terms["growth"] = psi * tau
    bracket = terms["decay"] - terms["input"] - terms["disturbance"] - terms["growth"]
    if not bracket > 0:
        worst = max(("input", "disturbance", "growth"), key=terms.get)
        raise InfeasibleError(f"quantisation bracket is {bracket:.6g} <= 0 (largest term: {worst})",
                              bracket=bracket, terms=terms)
    first = spec.gamma.inverse((1.0 - math.exp(-spec.lam * tau)) / spec.lam * bracket)
    second = spec.alpha_high.inverse(spec.alpha_low(eps))
    return float(min(first, second))


def feasible_tau(spec: LyapunovSpec, eps: float, omega: float, eps_tilde, psi: float,
                 convention: str = "inf") -> float:
    """Supremum of sampling periods for which a positive ``eta`` exists."""
    terms = _bracket(spec, eps, omega, eps_tilde, convention)
    bracket = terms["decay"] - terms["input"] - terms["disturbance"]
    if not bracket > 0:
        raise InfeasibleError(f"decay does not dominate the gain terms (bracket {bracket:.6g})",
                              bracket=bracket, terms=terms)
    if psi == 0:
        return math.inf
    return float(bracket / psi)


@dataclass
class SmallGainResult:
    feasible: bool
    lambda_max: float
    s: Optional[np.ndarray]
    method: str
    A: np.ndarray = field(repr=False, default=None)
    B: np.ndarray = field(repr=False, default=None)

    def to_dict(self) -> dict:
        return {"feasible": self.feasible, "lambda_max": self.lambda_max, "method": self.method,
                "s": None if self.s is None else self.s.tolist()}


def small_gain_matrices(network, topology: NetworkTopology):
    """Diagonal decay matrix and coupling matrix of the small-gain test.

    ``network`` maps each subsystem id (or lists, in topology order) to a
    ``(lambda, c_alpha, c_sigma)`` triple or a :class:`LyapunovSpec`.
    """
    ids = list(topology.index_set)
    if not isinstance(network, Mapping):
        network = dict(zip(ids, network))
    n = len(ids)
    pos = {k: a for a, k in enumerate(ids)}
    A = np.zeros((n, n))
    B = np.zeros((n, n))
    for i in ids:
        entry = network[i]
        if isinstance(entry, LyapunovSpec):
            lam, ca, cs = entry.lam, entry.c_alpha, entry.c_sigma
        elif isinstance(entry, Mapping):
            lam, ca, cs = entry["lambda"], entry["c_alpha"], entry["c_sigma"]
        else:
            lam, ca, cs = entry
        A[pos[i], pos[i]] = lam * ca
        for j in topology.neighbors(i):
            B[pos[i], pos[j]] = cs
    return A, B


def _power_radius(M: np.ndarray) -> float:
    # irreducible nonnegative block: power iteration on M + I avoids periodic oscillation
    n = M.shape[0]
    S = M + np.eye(n)
    v = np.ones(n) / n
    for _ in range(20000):
        y = S @ v
        y /= np.sum(y)
        if np.max(np.abs(y - v)) < 1e-14:
            v = y
            break
        v = y
    return max(float(np.sum(S @ v) / np.sum(v)) - 1.0, 0.0)


def _spectral_radius(M: np.ndarray) -> float:
    """Spectral radius; nonnegative matrices are split into strongly connected blocks."""
    n = M.shape[0]
    if n == 0:
        return 0.0
    if np.any(M < 0):
        return float(np.max(np.abs(np.linalg.eigvals(M))))
    k, labels = connected_components(M != 0, directed=True, connection="strong")
    rho = 0.0
    for c in range(k):
        idx = np.nonzero(labels == c)[0]
        block = M[np.ix_(idx, idx)]
        if len(idx) == 1:
            r = float(block[0, 0])
        elif len(idx) <= 64:
            r = float(np.max(np.abs(np.linalg.eigvals(block))))
        else:
            r = _power_radius(block)
        rho = max(rho, r)
    return rho


def small_gain_check(network, topology: NetworkTopology, method: str = "spectral") -> SmallGainResult:
    """Test existence of ``s > 0`` with ``(-A + B) s < 0``."""
    A, B = small_gain_matrices(network, topology)
    d = np.diag(A)
    if np.any(A - np.diag(d)):
        raise ValueError("decay matrix must be diagonal")
    if np.any(d == 0):
        raise ValueError("decay matrix is singular")
    M = B / d[:, None]
    lam_max = _spectral_radius(M)
    n = len(d)
    if method == "spectral":
        feasible = lam_max < 1.0
        s = None
        if feasible:
            # s = (I - M)^{-1} 1 = sum_k M^k 1 >= 1 and M s = s - 1 < s
            s = np.linalg.solve(np.eye(n) - M, np.ones(n))
            if np.any(s <= 0) or np.any((-A + B) @ s >= 0):
                s = None
                feasible = False
        return SmallGainResult(bool(feasible), lam_max, s, method, A, B)
    if method == "lp":
        # (-A + B) s <= -1 with s >= 1 is feasible iff the strict system is (scale invariance)
        res = linprog(np.zeros(n), A_ub=(-A + B), b_ub=-np.ones(n), bounds=[(1.0, None)] * n, method="highs")
        feasible = res.status == 0
        s = np.asarray(res.x) if feasible else None
        return SmallGainResult(bool(feasible), lam_max, s, method, A, B)
    raise ValueError(f"unknown small-gain method {method!r}")


def check_small_gain_constants(spec: LyapunovSpec, n_neighbors: int, theta: KInf = KInf.linear(1.0),
                               r=None) -> bool:
    """Sampled check of the two gain conditions tying ``alpha_low`` and
    ``sigma_d`` to ``theta`` (heuristic: log-spaced radii only)."""
    r = np.logspace(-6, 6, 241) if r is None else np.asarray(r, dtype=float)
    k = max(1, n_neighbors)
    ok = np.all(spec.alpha_low(r / k) >= spec.c_alpha * theta(r) * (1 - 1e-12))
    if n_neighbors:
        ok = ok and np.all(spec.sigma_d(r) <= spec.c_sigma * theta(r) * (1 + 1e-12))
    return bool(ok)


def solve_network_params(topology: NetworkTopology, specs: Mapping, eps_map: Mapping, omega_map: Mapping,
                         tau: float, psi_map: Mapping, convention: str = "inf", safety_factor: float = 0.99,
                         require_small_gain: bool = True) -> Dict[object, AbstractionParams]:
    """Quantisation parameters satisfying the per-subsystem bound and the
    neighbour-precision wiring simultaneously."""
    if not 0 < safety_factor <= 1:
        raise ValueError("safety factor must lie in (0, 1]")
    if require_small_gain and topology.edges:
        sg = small_gain_check(specs, topology, "spectral")
        if not sg.feasible:
            raise InfeasibleError(f"small-gain condition fails (lambda_max = {sg.lambda_max:.4f})",
                                  bracket=1.0 - sg.lambda_max)
    out = {}
    for i in topology.index_set:
        et = tilde_eps(topology, i, eps_map)
        try:
            bound = max_eta(specs[i], tau, eps_map[i], omega_map[i], et, psi_map[i], convention)
        except InfeasibleError as exc:
            exc.subsystem = i
            exc.args = (f"subsystem {i!r}: {exc.args[0]}",)
            raise
        eta = safety_factor * bound
        if not eta > 0:
            raise InfeasibleError(f"subsystem {i!r}: eta {eta} not positive", subsystem=i)
        out[i] = AbstractionParams(tau, eta, omega_map[i], eps_map[i], et, convention, psi_map[i], bound)
    return out


def relation_threshold(spec: LyapunovSpec, eps: float) -> float:
    return spec.alpha_low(eps)
