"""Continuous dynamics, fixed-step integration and growth bounds."""

from __future__ import annotations

import itertools
from dataclasses import dataclass, field
from typing import Callable, Optional

import numpy as np


class IntegrationError(RuntimeError):
    """Raised when the integrator produces a non-finite state."""

    def __init__(self, step: int, message: str = "non-finite state"):
        super().__init__(f"{message} at RK4 step {step}")
        self.step = step


@dataclass(frozen=True)
class Box:
    """Axis-aligned hyper-rectangle ``[lower, upper]``."""

    lower: np.ndarray
    upper: np.ndarray

    def __post_init__(self):
        lo = np.atleast_1d(np.asarray(self.lower, dtype=float))
        hi = np.atleast_1d(np.asarray(self.upper, dtype=float))
        if lo.shape != hi.shape or lo.ndim != 1:
            raise ValueError("box bounds must be vectors of equal length")
        if np.any(lo > hi):
            raise ValueError(f"empty box: lower {lo} exceeds upper {hi}")
        object.__setattr__(self, "lower", lo)
        object.__setattr__(self, "upper", hi)

    @classmethod
    def point(cls, x) -> "Box":
        return cls(x, x)

    @property
    def dim(self) -> int:
        return self.lower.size

    @property
    def center(self) -> np.ndarray:
        return 0.5 * (self.lower + self.upper)

    @property
    def radius(self) -> np.ndarray:
        return 0.5 * (self.upper - self.lower)

    def contains(self, x, tol: float = 0.0) -> np.ndarray:
        x = np.asarray(x, dtype=float)
        return np.all((x >= self.lower - tol) & (x <= self.upper + tol), axis=-1)

    def contains_box(self, other: "Box") -> bool:
        return bool(np.all(other.lower >= self.lower) and np.all(other.upper <= self.upper))

    def inflate(self, r) -> "Box":
        return Box(self.lower - r, self.upper + r)

    def vertices(self) -> np.ndarray:
        return np.array(list(itertools.product(*zip(self.lower, self.upper))), dtype=float).reshape(-1, self.dim)

    @staticmethod
    def product(*boxes: "Box") -> "Box":
        boxes = [b for b in boxes if b.dim]
        if not boxes:
            return Box(np.zeros(0), np.zeros(0))
        return Box(np.concatenate([b.lower for b in boxes]), np.concatenate([b.upper for b in boxes]))


@dataclass(frozen=True)
class VectorField:
    """Right-hand side ``dx/dt = f(x, u, w)``.

    Affine fields carry ``A``, ``B``, ``D`` and evaluate ``A x + B u + D w``;
    general fields carry a vectorised callable ``fn(x, u, w)`` acting on the
    last axis. ``lipschitz`` is the state Lipschitz constant in the infinity
    norm.
    """

    dim_x: int
    dim_u: int
    dim_w: int
    A: Optional[np.ndarray] = None
    B: Optional[np.ndarray] = None
    D: Optional[np.ndarray] = None
    fn: Optional[Callable] = field(default=None, compare=False)
    lipschitz: Optional[float] = None

    def __post_init__(self):
        if self.fn is None:
            for name, cols in (("A", self.dim_x), ("B", self.dim_u), ("D", self.dim_w)):
                mat = getattr(self, name)
                mat = np.zeros((self.dim_x, cols)) if mat is None else np.asarray(mat, dtype=float).reshape(self.dim_x, cols)
                object.__setattr__(self, name, mat)
            induced = float(np.max(np.sum(np.abs(self.A), axis=1))) if self.dim_x else 0.0
            if self.lipschitz is None:
                object.__setattr__(self, "lipschitz", induced)
            elif self.lipschitz < induced - 1e-12:
                raise ValueError(f"lipschitz constant {self.lipschitz} below induced norm {induced} of A")
        elif self.lipschitz is None or self.lipschitz <= 0:
            raise ValueError("general vector fields need a positive lipschitz constant")

    @classmethod
    def affine(cls, A, B=None, D=None, lipschitz=None) -> "VectorField":
        A = np.atleast_2d(np.asarray(A, dtype=float))
        n = A.shape[0]
        B = np.zeros((n, 0)) if B is None else np.asarray(B, dtype=float).reshape(n, -1)
        D = np.zeros((n, 0)) if D is None else np.asarray(D, dtype=float).reshape(n, -1)
        return cls(n, B.shape[1], D.shape[1], A, B, D, lipschitz=lipschitz)

    @classmethod
    def general(cls, fn, dim_x, dim_u, dim_w, lipschitz) -> "VectorField":
        return cls(dim_x, dim_u, dim_w, fn=fn, lipschitz=lipschitz)

    @property
    def is_affine(self) -> bool:
        return self.fn is None

    def __call__(self, x, u, w):
        x = np.asarray(x, dtype=float)
        u = np.asarray(u, dtype=float)
        w = np.asarray(w, dtype=float)
        if self.fn is not None:
            return np.asarray(self.fn(x, u, w), dtype=float)
        out = x @ self.A.T
        if self.dim_u:
            out = out + u @ self.B.T
        if self.dim_w:
            out = out + w @ self.D.T
        return out


@dataclass(frozen=True)
class EndpointMaps:
    """Exact discretisation ``x(tau) = M x + N u + P w`` of an affine field."""

    M: np.ndarray
    N: np.ndarray
    P: np.ndarray
    tau: float

    def __call__(self, x, u, w):
        out = np.asarray(x, dtype=float) @ self.M.T
        if self.N.shape[1]:
            out = out + np.asarray(u, dtype=float) @ self.N.T
        if self.P.shape[1]:
            out = out + np.asarray(w, dtype=float) @ self.P.T
        return out


def _steps(tau: float, h: float) -> int:
    if h <= 0 or tau < 0:
        raise ValueError("need h > 0 and tau >= 0")
    n = int(round(tau / h))
    if n == 0 and tau > 0:
        n = 1
    if abs(n * h - tau) > 1e-9 * max(1.0, tau):
        raise ValueError(f"step {h} does not divide tau={tau}")
    return n


def integrate_rk4(field: VectorField, x0, u, w, tau: float, h: Optional[float] = None) -> np.ndarray:
    """Classical RK4 endpoint with ``u`` and ``w`` held constant over ``[0, tau]``.

    Works on a single state (shape ``(n,)``) or a batch (shape ``(k, n)``);
    ``u`` and ``w`` broadcast against the batch. The default step is
    ``tau / 100``.
    """
    if h is None:
        h = tau / 100.0
    n_steps = _steps(tau, h)
    h = tau / n_steps if n_steps else h
    x = np.array(x0, dtype=float)
    u = np.asarray(u, dtype=float)
    w = np.asarray(w, dtype=float)
    for k in range(n_steps):
        k1 = field(x, u, w)
        k2 = field(x + 0.5 * h * k1, u, w)
        k3 = field(x + 0.5 * h * k2, u, w)
        k4 = field(x + h * k3, u, w)
        x = x + (h / 6.0) * (k1 + 2.0 * k2 + 2.0 * k3 + k4)
        if not np.all(np.isfinite(x)):
            raise IntegrationError(k + 1)
    return x


def _expm_taylor(G: np.ndarray, terms: int = 24) -> np.ndarray:
    # scaling and squaring around a truncated Taylor series
    norm = np.max(np.sum(np.abs(G), axis=1)) if G.size else 0.0
    s = max(0, int(np.ceil(np.log2(norm / 0.25)))) if norm > 0.25 else 0
    Gs = G / (2.0 ** s)
    E = np.eye(G.shape[0])
    term = np.eye(G.shape[0])
    for k in range(1, terms + 1):
        term = term @ Gs / k
        E = E + term
    for _ in range(s):
        E = E @ E
    return E


def affine_endpoint_maps(field: VectorField, tau: float, check: bool = True) -> EndpointMaps:
    """Closed-form one-step maps of an affine field over a sampling period."""
    if not field.is_affine:
        raise ValueError("endpoint maps need an affine vector field")
    n, m, p = field.dim_x, field.dim_u, field.dim_w
    G = np.zeros((n + m + p, n + m + p))
    G[:n, :n] = field.A
    G[:n, n:n + m] = field.B
    G[:n, n + m:] = field.D
    E = _expm_taylor(G * tau)
    maps = EndpointMaps(E[:n, :n].copy(), E[:n, n:n + m].copy(), E[:n, n + m:].copy(), float(tau))
    if check and tau > 0:
        rng = np.random.default_rng(0)
        x = rng.uniform(-1, 1, (3, n))
        u = rng.uniform(-1, 1, (3, m))
        w = rng.uniform(-1, 1, (3, p))
        ref = integrate_rk4(field, x, u, w, tau, tau / 100.0)
        err = np.max(np.abs(ref - maps(x, u, w)))
        scale = 1.0 + np.max(np.abs(ref))
        if err > 1e-6 * scale:
            raise RuntimeError(f"endpoint maps disagree with RK4 by {err:.3e}")
    return maps


def bound_chi(field: VectorField, Xp: Box, Up: Box, Wp: Box, margin: Optional[float] = None,
              samples: int = 11, rows=None) -> float:
    """Upper bound on ``max ||f(x, u, w)||_inf`` over the product of boxes.

    Affine fields are bounded exactly: each row is affine, so its extreme
    absolute value over a box sits at a vertex and equals the interval
    evaluation of the row. General fields are sampled on a regular grid and
    the maximum is multiplied by ``margin`` (mandatory, >= 1).
    ``rows`` restricts the bound to a subset of state components.
    """
    rows = slice(None) if rows is None else list(rows)
    if field.is_affine:
        lo = np.concatenate([Xp.lower, Up.lower, Wp.lower])
        hi = np.concatenate([Xp.upper, Up.upper, Wp.upper])
        C = np.hstack([field.A, field.B, field.D])[rows]
        if C.size == 0:
            return 0.0
        top = np.sum(np.maximum(C * lo, C * hi), axis=1)
        bot = np.sum(np.minimum(C * lo, C * hi), axis=1)
        return float(np.max(np.maximum(np.abs(top), np.abs(bot))))
    if margin is None:
        raise ValueError("general vector fields need a margin factor for the sampled chi bound")
    if margin < 1.0:
        raise ValueError("margin factor must be >= 1")
    axes = [np.linspace(l, h, samples if h > l else 1) for l, h in
            zip(np.concatenate([Xp.lower, Up.lower, Wp.lower]), np.concatenate([Xp.upper, Up.upper, Wp.upper]))]
    pts = np.array(list(itertools.product(*axes)), dtype=float)
    n, m = field.dim_x, field.dim_u
    vals = field(pts[:, :n], pts[:, n:n + m], pts[:, n + m:])
    vals = np.atleast_2d(vals)[:, rows]
    return float(margin * np.max(np.abs(vals))) if vals.size else 0.0


def compute_psi(sigma_d, eps_tilde_norm: float, neighbor_chi: float) -> float:
    """Weak-interconnection constant: max slope of ``sigma_d`` on
    ``[0, eps_tilde_norm]`` times the rate bound of the feeding neighbour
    components."""
    if neighbor_chi == 0.0:
        return 0.0
    slope = sigma_d.max_derivative(eps_tilde_norm)
    if not np.isfinite(slope):
        raise ValueError("sigma_d has an unbounded derivative on [0, ||eps_tilde||]")
    return float(slope * neighbor_chi)
