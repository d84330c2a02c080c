"""Network configuration: loading, validation and per-template model assembly."""

from __future__ import annotations

import copy
import hashlib
import json
import logging
import math
from dataclasses import dataclass
from importlib import resources
from pathlib import Path
from typing import Dict, List, Optional

import jsonschema
import numpy as np
import yaml

from .abstraction import (AbstractSystem, LyapunovRelation, ExplicitDisturbances,
                          UniformGrid, build_abstraction, build_grid)
from .lyapunov import (AbstractionParams, InfeasibleError, KInf, LyapunovSpec, feasible_tau, max_eta,
                       small_gain_check, tilde_eps, vector_norm)
from .metric import NetworkTopology
from .ode import Box, VectorField, bound_chi, compute_psi
from .runtime import SimSubsystem
from .synthesis import (AbstractSpec, Complement, Ellipsoid, Rectangle, deflate_set,
                        solve_reach_avoid, solve_safety)

log = logging.getLogger(__name__)


class ConfigError(ValueError):
    pass


def _schema() -> dict:
    return json.loads(resources.files("dbsynth").joinpath("schema.json").read_text())


def bundled_config(name: str) -> Path:
    """Path of a configuration shipped with the package."""
    path = resources.files("dbsynth").joinpath("configs", f"{name}.yaml")
    if not path.is_file():
        raise ConfigError(f"no bundled configuration named {name!r}")
    return Path(str(path))


def load_config(source) -> dict:
    """Read and validate a configuration (path, bundled name or mapping)."""
    if isinstance(source, dict):
        cfg = copy.deepcopy(source)
    else:
        path = Path(source)
        if not path.exists() and not path.suffix:
            path = bundled_config(str(source))
        with open(path) as fh:
            cfg = yaml.safe_load(fh)
    validator = jsonschema.Draft202012Validator(_schema())
    errors = sorted(validator.iter_errors(cfg), key=lambda e: list(e.absolute_path))
    if errors:
        lines = []
        for e in errors:
            where = "/".join(str(p) for p in e.absolute_path) or "<root>"
            lines.append(f"{where}: {e.message}")
        raise ConfigError("invalid configuration:\n  " + "\n  ".join(lines))
    return cfg


def config_hash(cfg: dict) -> str:
    return hashlib.sha256(json.dumps(cfg, sort_keys=True).encode()).hexdigest()[:16]


def _gain(v) -> KInf:
    return KInf(float(v["c"]), float(v.get("p", 1.0))) if isinstance(v, dict) else KInf.linear(float(v))


@dataclass
class Template:
    name: str
    field: VectorField
    state_domain: Box
    input_domain: Box
    lyap: LyapunovSpec
    P: np.ndarray
    psi: Optional[float]
    eps: float
    omega: float
    eta: Optional[float]
    spec: dict

    @property
    def relation_radius(self) -> float:
        """Euclidean radius enclosing the relation's sublevel set."""
        lam_min = float(np.min(np.linalg.eigvalsh(self.P)))
        return float(self.lyap.alpha_low(self.eps)) / math.sqrt(lam_min)

    def relation(self) -> LyapunovRelation:
        return LyapunovRelation(self.lyap, self.eps, P=self.P)

    def digest(self) -> str:
        f = self.field
        blob = {"A": f.A.tolist(), "B": f.B.tolist(), "D": f.D.tolist(),
                "X": [self.state_domain.lower.tolist(), self.state_domain.upper.tolist()],
                "U": [self.input_domain.lower.tolist(), self.input_domain.upper.tolist()],
                "eps": self.eps, "omega": self.omega, "spec": self.spec}
        return hashlib.sha256(json.dumps(blob, sort_keys=True).encode()).hexdigest()[:16]


@dataclass
class EdgeSpec:
    source: str
    target: str
    coords: tuple
    slots: tuple


class Network:
    """Instances of templates wired by coordinate-selecting edges."""

    def __init__(self, cfg: dict, norm: Optional[str] = None, spec_margin: Optional[str] = None):
        self.cfg = cfg
        self.name = cfg.get("name", "network")
        self.tau = float(cfg["tau"])
        self.substeps = int(cfg.get("substeps", 100))
        self.norm = norm or cfg.get("norm", "inf")
        self.safety_factor = float(cfg.get("safety_factor", 0.99))
        self.spec_margin = spec_margin or cfg.get("spec_margin", "eps")
        self.sg_method = cfg.get("small_gain_method", "spectral")
        self.templates: Dict[str, Template] = {k: self._template(k, v) for k, v in cfg["templates"].items()}
        self.instances: Dict[str, str] = {}
        self.edges: List[EdgeSpec] = []
        self._expand(cfg)
        self.topology = NetworkTopology(list(self.instances), {(e.source, e.target) for e in self.edges})
        self.offsets = {}
        off = 0
        for i, t in self.instances.items():
            self.offsets[i] = off
            off += self.templates[t].field.dim_x
        self.total_dim = off
        self._validate_edges()

    # --- construction -----------------------------------------------------------------

    def _template(self, name, t) -> Template:
        A = np.asarray(t["A"], dtype=float)
        n = A.shape[0]
        B = np.asarray(t.get("B", np.zeros((n, 0))), dtype=float).reshape(n, -1)
        D = np.asarray(t.get("D", np.zeros((n, 0))), dtype=float).reshape(n, -1)
        try:
            field = VectorField.affine(A, B, D, lipschitz=t.get("lipschitz"))
            X = Box(t["state_domain"]["lower"], t["state_domain"]["upper"])
            U = Box(t["input_domain"]["lower"], t["input_domain"]["upper"])
        except ValueError as exc:
            raise ConfigError(f"templates/{name}: {exc}") from None
        if X.dim != n or U.dim != B.shape[1]:
            raise ConfigError(f"templates/{name}: domain dimensions do not match A/B")
        ly = t["lyapunov"]
        kw = {}
        if "c_alpha" in ly:
            kw["c_alpha"] = float(ly["c_alpha"])
        if "c_sigma" in ly:
            kw["c_sigma"] = float(ly["c_sigma"])
        try:
            lyap = LyapunovSpec(float(ly["lambda"]), _gain(ly["alpha_low"]), _gain(ly["alpha_high"]),
                                _gain(ly["sigma_u"]), _gain(ly["sigma_d"]), _gain(ly["gamma"]), **kw)
        except ValueError as exc:
            raise ConfigError(f"templates/{name}/lyapunov: {exc}") from None
        P = np.asarray(t.get("V_matrix", np.eye(n)), dtype=float)
        if P.shape != (n, n) or not np.allclose(P, P.T) or np.min(np.linalg.eigvalsh(P)) <= 0:
            raise ConfigError(f"templates/{name}/V_matrix: must be symmetric positive definite {n}x{n}")
        return Template(name, field, X, U, lyap, P, t.get("psi"), float(t["eps"]), float(t["omega"]),
                        t.get("eta"), t.get("spec", {}))

    def _expand(self, cfg):
        if "network" in cfg and "subsystems" in cfg:
            raise ConfigError("give either network (generator) or subsystems, not both")
        if "network" in cfg:
            net = cfg["network"]
            members = net["members"]
            for m in members:
                if m not in self.templates:
                    raise ConfigError(f"network/members: unknown template {m!r}")
            for p in range(1, net["pairs"] + 1):
                for m in members:
                    self.instances[f"{m}_{p}"] = m

            def ref(k, p):
                if not isinstance(k, int) or not 0 <= k < len(members):
                    raise ConfigError(f"network: member reference {k!r} must be an index into members")
                return f"{members[k]}_{p}"

            for p in range(1, net["pairs"] + 1):
                for e in net.get("within", []):
                    self.edges.append(self._edge(ref(e["source"], p), ref(e["target"], p), e))
                if p > 1:
                    for e in net.get("chain", []):
                        self.edges.append(self._edge(ref(e["source"], p - 1), ref(e["target"], p), e))
        else:
            subs = cfg.get("subsystems") or [{"id": k, "template": k} for k in self.templates]
            for s in subs:
                if s["template"] not in self.templates:
                    raise ConfigError(f"subsystems: unknown template {s['template']!r}")
                if str(s["id"]) in self.instances:
                    raise ConfigError(f"subsystems: duplicate id {s['id']!r}")
                self.instances[str(s["id"])] = s["template"]
            for e in cfg.get("edges", []):
                self.edges.append(self._edge(str(e["source"]), str(e["target"]), e))

    def _edge(self, src, dst, e) -> EdgeSpec:
        for x in (src, dst):
            if x not in self.instances:
                raise ConfigError(f"edge {src}->{dst}: unknown subsystem {x!r}")
        sdim = self.templates[self.instances[src]].field.dim_x
        coords = tuple(e.get("source_coords", range(sdim)))
        slots = tuple(e.get("target_slots", range(len(coords))))
        if len(coords) != len(slots):
            raise ConfigError(f"edge {src}->{dst}: source_coords and target_slots differ in length")
        return EdgeSpec(src, dst, coords, slots)

    def _validate_edges(self):
        fed = {}
        for e in self.edges:
            sdim = self.templates[self.instances[e.source]].field.dim_x
            wdim = self.templates[self.instances[e.target]].field.dim_w
            if any(c >= sdim for c in e.coords):
                raise ConfigError(f"edge {e.source}->{e.target}: source coordinate out of range (dim {sdim})")
            if any(s >= wdim for s in e.slots):
                raise ConfigError(f"edge {e.source}->{e.target}: disturbance slot out of range (dim {wdim})")
            for s in e.slots:
                if (e.target, s) in fed:
                    raise ConfigError(f"edge {e.source}->{e.target}: slot {s} already fed by {fed[(e.target, s)]}")
                fed[(e.target, s)] = e.source

    # --- model queries ------------------------------------------------------------------

    def gather(self, i) -> np.ndarray:
        t = self.templates[self.instances[i]]
        g = np.full(t.field.dim_w, -1, dtype=np.int64)
        for e in self.edges:
            if e.target == i:
                for c, s in zip(e.coords, e.slots):
                    g[s] = self.offsets[e.source] + c
        return g

    def feeders(self, i):
        """``{neighbour: coords}`` of the state components feeding ``i``."""
        out = {}
        for e in self.edges:
            if e.target == i:
                out.setdefault(e.source, []).extend(e.coords)
        return out

    def eps_map(self) -> dict:
        return {i: self.templates[t].eps for i, t in self.instances.items()}

    def chi(self, template: str) -> float:
        t = self.templates[template]
        return bound_chi(t.field, t.state_domain, t.input_domain, self.disturbance_box(template))

    def disturbance_box(self, template: str, grids: Optional[dict] = None) -> Box:
        """Hull of the disturbance inputs over all instances of a template.

        Unfed slots contribute zero; fed slots range over the feeding
        neighbour's state domain (or its grid span when ``grids`` is given).
        """
        t = self.templates[template]
        lo = np.full(t.field.dim_w, np.inf)
        hi = np.full(t.field.dim_w, -np.inf)
        for i, ti in self.instances.items():
            if ti != template:
                continue
            src = {}
            for e in self.edges:
                if e.target == i:
                    for c, s in zip(e.coords, e.slots):
                        src[s] = (e.source, c)
            for s in range(t.field.dim_w):
                if s in src:
                    j, c = src[s]
                    tj = self.instances[j]
                    if grids is not None:
                        g = grids[tj]
                        a, b = g.kmin[c] * g.step[c], g.kmax[c] * g.step[c]
                    else:
                        dom = self.templates[tj].state_domain
                        a, b = dom.lower[c], dom.upper[c]
                else:
                    a = b = 0.0
                lo[s], hi[s] = min(lo[s], a), max(hi[s], b)
        if t.field.dim_w and not np.all(np.isfinite(lo)):
            raise ConfigError(f"template {template!r} has no instances")
        return Box(lo, hi) if t.field.dim_w else Box(np.zeros(0), np.zeros(0))

    def psi(self, i) -> float:
        t = self.templates[self.instances[i]]
        if t.psi is not None:
            return float(t.psi)
        nchi = 0.0
        for j, coords in self.feeders(i).items():
            tj = self.instances[j]
            T = self.templates[tj]
            nchi = max(nchi, bound_chi(T.field, T.state_domain, T.input_domain, self.disturbance_box(tj),
                                       rows=sorted(set(coords))))
        et = tilde_eps(self.topology, i, self.eps_map())
        return compute_psi(t.lyap.sigma_d, vector_norm(et, self.norm), nchi)

    def check(self) -> dict:
        """Small-gain test and per-subsystem quantisation bounds."""
        specs = {i: self.templates[t].lyap for i, t in self.instances.items()}
        sg = small_gain_check(specs, self.topology, self.sg_method) if self.topology.edges else None
        other = "lp" if self.sg_method == "spectral" else "spectral"
        sg_other = small_gain_check(specs, self.topology, other) if self.topology.edges else None
        eps = self.eps_map()
        subsystems = {}
        feasible = sg is None or sg.feasible
        for i, tname in self.instances.items():
            t = self.templates[tname]
            et = tilde_eps(self.topology, i, eps)
            psi = self.psi(i)
            row = {"template": tname, "eps": t.eps, "omega": t.omega, "eps_tilde": et.tolist(), "psi": psi}
            for conv in ("inf", "euclid"):
                try:
                    row[f"eta_max_{conv}"] = max_eta(t.lyap, self.tau, t.eps, t.omega, et, psi, conv)
                except InfeasibleError as exc:
                    row[f"eta_max_{conv}"] = None
                    row[f"infeasible_{conv}"] = str(exc)
            try:
                row["tau_max"] = feasible_tau(t.lyap, t.eps, t.omega, et, psi, self.norm)
            except InfeasibleError:
                row["tau_max"] = None
            row["eta_max"] = row[f"eta_max_{self.norm}"]
            if row["eta_max"] is None:
                feasible = False
            subsystems[i] = row
        templates = {}
        for tname, t in self.templates.items():
            bounds = [subsystems[i]["eta_max"] for i, tn in self.instances.items() if tn == tname]
            bound = None if (not bounds or any(b is None for b in bounds)) else min(bounds)
            eta = t.eta if t.eta is not None else (None if bound is None else self.safety_factor * bound)
            templates[tname] = {"eta_bound": bound, "eta": eta,
                                "certified": bound is not None and eta is not None and eta <= bound,
                                "chi": self.chi(tname), "relation_radius": t.relation_radius,
                                "digest": t.digest()}
        return {
            "name": self.name, "tau": self.tau, "norm": self.norm, "feasible": bool(feasible),
            "small_gain": sg.to_dict() if sg else {"feasible": True, "lambda_max": 0.0, "method": self.sg_method, "s": None},
            "small_gain_cross_check": sg_other.to_dict() if sg_other else None,
            "subsystems": subsystems, "templates": templates,
        }

    # --- artefacts ----------------------------------------------------------------------

    def params(self, template: str, report: Optional[dict] = None) -> AbstractionParams:
        report = report or self.check()
        row = report["templates"][template]
        if row["eta"] is None:
            raise InfeasibleError(f"template {template!r}: no admissible eta")
        worst = min((i for i, tn in self.instances.items() if tn == template),
                    key=lambda i: report["subsystems"][i]["eta_max"])
        srow = report["subsystems"][worst]
        t = self.templates[template]
        return AbstractionParams(self.tau, row["eta"], t.omega, t.eps, srow["eps_tilde"], self.norm, srow["psi"],
                                 row["eta_bound"] if row["eta_bound"] is not None else math.nan)

    def grid(self, template: str, report: Optional[dict] = None) -> UniformGrid:
        return build_grid(self.templates[template].state_domain, self.params(template, report).eta)

    def build_abstraction(self, template: str, mode: str = "box", report: Optional[dict] = None,
                          threads: int = 1) -> AbstractSystem:
        report = report or self.check()
        grids = {tn: self.grid(tn, report) for tn in self.templates}
        t = self.templates[template]
        wbox = self.disturbance_box(template, grids)
        if mode == "box":
            dist = ExplicitDisturbances(np.vstack([wbox.lower, wbox.upper])) if wbox.dim else None
        else:
            dist = self._explicit_disturbances(template, grids)
        abs_ = build_abstraction(t.field, self.params(template, report), t.state_domain, t.input_domain, dist,
                                 mode, h=self.tau / self.substeps, threads=threads)
        abs_.meta.update({"template": template, "template_digest": t.digest(), "norm": self.norm})
        return abs_

    def _explicit_disturbances(self, template, grids):
        """All quantised disturbance values over the instances of a template."""
        t = self.templates[template]
        vals = set()
        for i, ti in self.instances.items():
            if ti != template:
                continue
            per_slot = []
            src = {}
            for e in self.edges:
                if e.target == i:
                    for c, s in zip(e.coords, e.slots):
                        src[s] = (e.source, c)
            for s in range(t.field.dim_w):
                if s in src:
                    j, c = src[s]
                    per_slot.append(grids[self.instances[j]].axes()[c])
                else:
                    per_slot.append(np.zeros(1))
            grid = np.stack(np.meshgrid(*per_slot, indexing="ij"), axis=-1).reshape(-1, t.field.dim_w) \
                if per_slot else np.zeros((1, 0))
            vals.update(map(tuple, grid))
        return ExplicitDisturbances(np.array(sorted(vals), dtype=float).reshape(len(vals), t.field.dim_w))

    def margin(self, template: str) -> float:
        t = self.templates[template]
        r = float(t.spec.get("margin", t.relation_radius))
        if self.spec_margin == "eps-plus-chi":
            r += self.chi(template) * self.tau / 2.0
        return r

    def target_set(self, template: str):
        tgt = self.templates[template].spec.get("target")
        if not tgt:
            return None
        if "ellipsoid" in tgt:
            e = tgt["ellipsoid"]
            return Ellipsoid(e["center"], e.get("coeffs", 1.0), float(e["level"]))
        return Rectangle(Box(tgt["rectangle"]["lower"], tgt["rectangle"]["upper"]))

    def safe_set(self, template: str):
        t = self.templates[template]
        obs = t.spec.get("obstacle")
        if obs:
            return Complement(Box(obs["lower"], obs["upper"]), t.state_domain)
        return Rectangle(t.state_domain)

    def abstract_spec(self, template: str, grid: UniformGrid) -> AbstractSpec:
        t = self.templates[template]
        r = self.margin(template)
        safe = deflate_set(self.safe_set(template), r, grid, "euclid", shrink_within=True)
        objective = t.spec.get("objective", "reach_while_avoid" if t.spec.get("target") else "safety")
        target = None
        if objective != "safety":
            tset = self.target_set(template)
            if tset is None:
                raise ConfigError(f"template {template!r}: objective {objective} needs a target")
            target = deflate_set(tset, r, grid, "euclid") & safe
        return AbstractSpec(target, safe, objective)

    def synthesize(self, template: str, abs_: AbstractSystem):
        spec = self.abstract_spec(template, abs_.state_grid)
        if spec.objective == "safety":
            ctrl = solve_safety(abs_, spec.safe)
        else:
            ctrl = solve_reach_avoid(abs_, spec.target, spec.safe, spec.objective)
        ctrl.meta.update({"template": template, "grid": abs_.state_grid.digest(), "norm": self.norm,
                          "margin": repr(self.margin(template))})
        return ctrl, spec

    def sim_subsystems(self, abstractions: dict, controllers: dict) -> List[SimSubsystem]:
        out = []
        chis = {tn: self.chi(tn) for tn in self.templates}
        for i, tn in self.instances.items():
            t = self.templates[tn]
            out.append(SimSubsystem(i, t.field, self.offsets[i], self.gather(i), abstractions[tn],
                                    controllers[tn], t.relation(), self.target_set(tn) or Rectangle(t.state_domain),
                                    self.safe_set(tn), chis[tn], group=tn))
        return out
