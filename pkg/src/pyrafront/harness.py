"""Experiment configuration, staged pipeline, field files, reports and the CLI.

A run directory is named by the hash of the canonical config text. Every
stage writes its tables there and a ``<stage>.done.json`` marker; a later
run with the same config reuses finished stages and reloads their outputs.
"""
from __future__ import annotations

import argparse
import csv
import hashlib
import json
import os
import struct
import sys
import time
import warnings
from dataclasses import asdict, dataclass, field, fields, replace
from pathlib import Path
from typing import Optional

import numpy as np
from scipy import fft

from . import wavelab
from .fracop import Field3D, SpectralGrid
from .mollify import P_eval, build_mollifier, decay_audit, mollify_pyramid
from .profile import Nonlinearity, ProfileNumerics, decay_report, load_profile, save_profile, solve_profile
from .pyramid import height, load_pyramid, make_regular_pyramid, save_pyramid

VERSION = "0.1.0"
OUT_ENV = "PYRAFRONT_OUT"
STAGES = ("profile", "geometry", "r1", "params", "verify", "iterate")
CHECKS = (
    "operator_oracles",
    "layer_oracle",
    "profile_decay",
    "mollifier",
    "S_audit",
    "R1_scaling",
    "super_solution",
    "iteration",
    "determinism",
)


# ---------------------------------------------------------------------------
# configuration


def _floats(text) -> tuple:
    if isinstance(text, (tuple, list)):
        return tuple(float(v) for v in text)
    return tuple(float(v) for v in str(text).split(",") if v.strip())


@dataclass(frozen=True)
class NonlinearitySection:
    kind: str = "cubic"
    t0: float = -0.3


@dataclass(frozen=True)
class PyramidSection:
    N: int = 4


@dataclass(frozen=True)
class ProfileSection:
    M: float = 200.0
    nodes: int = 8192
    tol: float = 1e-10


@dataclass(frozen=True)
class BoxSection:
    L: float = 24.0
    n: int = 48


@dataclass(frozen=True)
class IterationSection:
    K_factor: float = 1.1
    tol: float = 1e-5
    max_m: int = 50
    base_alpha: float = 0.5
    r1_mode: str = "table"


@dataclass(frozen=True)
class SamplingSection:
    seed: int = 0
    sub_points: int = 20
    verify_points: int = 1000
    verify_columns: int = 100
    ordering_points: int = 10000
    residual_points: int = 50
    r1_alphas: tuple = (0.4, 0.2, 0.1, 0.05)
    r1_lambda: tuple = (0.25, 1.0, 4.0, 16.0)
    r1_offsets: tuple = (-4.0, -1.0, 0.0, 1.0, 4.0)


@dataclass(frozen=True)
class OutputSection:
    directory: str = "runs"


_SECTIONS = {
    "nonlinearity": NonlinearitySection,
    "pyramid": PyramidSection,
    "profile": ProfileSection,
    "box": BoxSection,
    "iteration": IterationSection,
    "sampling": SamplingSection,
    "output": OutputSection,
}


@dataclass(frozen=True)
class ExperimentConfig:
    """All inputs of a run; validated on construction.

    Text form: one ``key = value`` per line, dotted keys for sections
    (``box.L = 24``), ``#`` comments, comma-separated tuples.
    """

    s: float = 0.75
    c_over_k: float = 2.0
    nonlinearity: NonlinearitySection = field(default_factory=NonlinearitySection)
    pyramid: PyramidSection = field(default_factory=PyramidSection)
    profile: ProfileSection = field(default_factory=ProfileSection)
    box: BoxSection = field(default_factory=BoxSection)
    iteration: IterationSection = field(default_factory=IterationSection)
    sampling: SamplingSection = field(default_factory=SamplingSection)
    output: OutputSection = field(default_factory=OutputSection)

    def __post_init__(self):
        errs = []
        if not 0 < self.s < 1:
            errs.append("s must lie in (0, 1)")
        if not self.c_over_k > 1:
            errs.append("c_over_k must exceed 1 (the pyramid slope needs c > k)")
        nl = self.nonlinearity
        if nl.kind not in ("cubic", "sine"):
            errs.append("nonlinearity.kind must be cubic or sine")
        if nl.kind == "cubic" and not -1 < nl.t0 < 1:
            errs.append("nonlinearity.t0 must lie in (-1, 1)")
        if self.pyramid.N < 3:
            errs.append("pyramid.N must be at least 3")
        p = self.profile
        if not (p.M > 0 and p.nodes >= 64 and 0 < p.tol < 1):
            errs.append("profile needs M > 0, nodes >= 64 and tol in (0, 1)")
        b = self.box
        if not (b.L > 0 and b.n >= 8 and b.n % 2 == 0):
            errs.append("box needs L > 0 and an even n >= 8")
        it = self.iteration
        if not (it.K_factor > 1 and 0 < it.tol < 1 and it.max_m >= 1 and 0 < it.base_alpha <= 1):
            errs.append("iteration needs K_factor > 1, tol in (0, 1), max_m >= 1, base_alpha in (0, 1]")
        if it.r1_mode not in ("drop", "table"):
            errs.append("iteration.r1_mode must be drop or table")
        sm = self.sampling
        counts = (sm.sub_points, sm.verify_points, sm.verify_columns, sm.ordering_points, sm.residual_points)
        if sm.seed < 0 or min(counts) < 1:
            errs.append("sampling counts must be positive and the seed non-negative")
        if sm.verify_points % sm.verify_columns or sm.verify_points // sm.verify_columns < 2:
            errs.append("sampling.verify_points must be a multiple (>= 2) of verify_columns")
        if len(sm.r1_alphas) < 2 or not all(0 < a < 1 for a in sm.r1_alphas):
            errs.append("sampling.r1_alphas needs at least two values in (0, 1)")
        if not sm.r1_lambda or not sm.r1_offsets or min(sm.r1_lambda) <= 0:
            errs.append("sampling.r1_lambda must be positive and r1_offsets non-empty")
        if errs:
            raise ValueError("; ".join(errs))

    @property
    def balanced(self) -> bool:
        """Odd nonlinearity: the planar speed vanishes and no pyramid exists."""
        return self.nonlinearity.kind == "sine" or self.nonlinearity.t0 == 0.0

    def nonlinearity_obj(self) -> Nonlinearity:
        if self.nonlinearity.kind == "sine":
            return Nonlinearity.sine()
        return Nonlinearity.cubic(self.nonlinearity.t0)

    def to_text(self) -> str:
        lines = [f"s = {self.s!r}", f"c_over_k = {self.c_over_k!r}"]
        for name in _SECTIONS:
            sec = getattr(self, name)
            for f in fields(sec):
                v = getattr(sec, f.name)
                v = ",".join(repr(float(x)) for x in v) if isinstance(v, tuple) else repr(v) if not isinstance(v, str) else v
                lines.append(f"{name}.{f.name} = {v}")
        return "\n".join(lines) + "\n"

    def hash(self) -> str:
        """sha256 of the canonical text with the output directory left out."""
        body = "\n".join(l for l in self.to_text().splitlines() if not l.startswith("output."))
        return hashlib.sha256(body.encode()).hexdigest()[:16]

    @classmethod
    def from_text(cls, text: str) -> "ExperimentConfig":
        top, sections = {}, {name: {} for name in _SECTIONS}
        for n, raw in enumerate(text.splitlines(), 1):
            line = raw.split("#", 1)[0].strip()
            if not line:
                continue
            key, sep, val = line.partition("=")
            if not sep:
                raise ValueError(f"line {n}: expected key = value")
            key, val = key.strip(), val.strip()
            if "." in key:
                sec, _, name = key.partition(".")
                if sec not in _SECTIONS:
                    raise ValueError(f"line {n}: unknown section {sec!r}")
                kinds = {f.name: f for f in fields(_SECTIONS[sec])}
                if name not in kinds:
                    raise ValueError(f"line {n}: unknown key {key!r}")
                sections[sec][name] = _coerce(kinds[name], val)
            else:
                if key not in ("s", "c_over_k"):
                    raise ValueError(f"line {n}: unknown key {key!r}")
                top[key] = float(val)
        return cls(**top, **{k: _SECTIONS[k](**v) for k, v in sections.items()})

    @classmethod
    def from_file(cls, path) -> "ExperimentConfig":
        return cls.from_text(Path(path).read_text())

    def with_output(self, directory) -> "ExperimentConfig":
        return replace(self, output=OutputSection(str(directory)))


def _coerce(f, val: str):
    default = f.default if f.default is not f.default_factory else None
    if isinstance(default, tuple):
        return _floats(val)
    if isinstance(default, bool):
        return val.lower() in ("1", "true", "yes")
    if isinstance(default, int):
        return int(val)
    if isinstance(default, float):
        return float(val)
    return val


def load_config(path=None, out=None) -> ExperimentConfig:
    """Config from ``path`` (defaults otherwise); output directory from ``out``, then $PYRAFRONT_OUT."""
    cfg = ExperimentConfig.from_file(path) if path else ExperimentConfig()
    out = out or os.environ.get(OUT_ENV)
    return cfg.with_output(out) if out else cfg


# ---------------------------------------------------------------------------
# field files

MAGIC = b"FAWF"
FORMAT_VERSION = 1
_HEADER = struct.Struct("<4sI3I3d")


def export_field(field3d: Field3D, path, config_hash: Optional[str] = None) -> None:
    """Binary field file plus a JSON sidecar ``<path>.json`` holding the config hash."""
    g = field3d.grid
    if len(g.shape) != 3:
        raise ValueError("only 3D fields can be exported")
    path = Path(path)
    with open(path, "wb") as fh:
        fh.write(_HEADER.pack(MAGIC, FORMAT_VERSION, *g.shape, *map(float, g.half_length)))
        fh.write(np.ascontiguousarray(field3d.values, dtype="<f8").tobytes(order="C"))
    side = {"format_version": FORMAT_VERSION, "config_hash": config_hash, "shape": list(g.shape),
            "half_length": [float(v) for v in g.half_length]}
    Path(str(path) + ".json").write_text(json.dumps(side, indent=1) + "\n")


def import_field(path, config_hash: Optional[str] = None) -> Field3D:
    """Read a field file; a sidecar hash differing from ``config_hash`` only warns."""
    path = Path(path)
    data = path.read_bytes()
    if len(data) < _HEADER.size or data[:4] != MAGIC:
        raise ValueError(f"{path} is not a field file (bad magic)")
    magic, version, n0, n1, n2, L0, L1, L2 = _HEADER.unpack_from(data)
    if version != FORMAT_VERSION:
        raise ValueError(f"unsupported field format version {version}")
    count = n0 * n1 * n2
    if len(data) != _HEADER.size + 8 * count:
        raise ValueError(f"{path}: payload size does not match the header")
    vals = np.frombuffer(data, dtype="<f8", offset=_HEADER.size, count=count).reshape(n0, n1, n2).astype(float)
    side = Path(str(path) + ".json")
    if config_hash is not None:
        stored = json.loads(side.read_text()).get("config_hash") if side.exists() else None
        if stored != config_hash:
            warnings.warn(f"{path}: sidecar config hash {stored} differs from {config_hash}")
    grid = SpectralGrid((L0, L1, L2), (n0, n1, n2), any_size=True)
    return Field3D(grid, vals)


# ---------------------------------------------------------------------------
# tables


SCHEMA = {
    "profile.csv": {"mu": "profile node", "phi": "Phi", "phi1": "Phi'", "phi2": "Phi''"},
    "profile_decay.csv": {"quantity": "phi (1-|Phi|), phi1 or phi2", "side": "plus or minus tail",
                          "exponent": "log-log slope", "constant": "fitted prefactor", "rms": "fit residual"},
    "geometry_decay.csv": {"quantity": "excess, grad_excess, hess, S or fraclap_S", "exponent": "slope in lambda",
                           "target": "expected slope", "rms": "worst fit residual over rays"},
    "geometry_checks.csv": {"check": "mollifier or surface property", "value": "measured value",
                            "target": "reference value or bound", "passed": "1 if within tolerance"},
    "r1_samples.csv": {"alpha": "scale", "column": "sample column index", "x": "unscaled x", "y": "unscaled y",
                       "lambda": "edge distance of the column", "offset": "mu_bar / alpha", "R1": "remainder",
                       "error": "quadrature error estimate"},
    "r1_fits.csv": {"fit": "alpha, lambda@<alpha> or column@<index>", "exponent": "log-log slope",
                    "constant": "prefactor", "rms": "fit residual"},
    "params.csv": {"name": "constant", "value": "value"},
    "verify_sub.csv": {"x": "point", "y": "point", "z": "point", "residual": "L[v_j]", "error": "quadrature error"},
    "verify_super.csv": {"x": "point", "y": "point", "z": "point", "case": "1 near +-1, 2 mid-range",
                         "LV": "L[V]", "S": "S(alpha x, alpha y)", "gap": "V - v"},
    "iteration_history.csv": {"m": "step", "residual": "sup |w_m - w_{m-1}|", "monotone_margin": "min over core of w_m - w_{m-1}",
                              "sub_margin": "min over core of u - v", "super_margin": "min over core of V - u",
                              "inner_steps": "linear solver sweeps"},
    "residual.csv": {"x": "core node", "y": "core node", "z": "core node", "residual": "L[u] by pointwise quadrature"},
    "gamma_R.csv": {"R": "distance from the edges", "count": "core nodes in Gamma_R",
                    "sup_u_minus_v": "sup |u - v|", "sup_V_minus_v": "sup (V - v)"},
    "summary.csv": {"check": "acceptance check", "status": "pass, fail or not_run", "detail": "key figures"},
}


def _fmt(v) -> str:
    if isinstance(v, (bool, np.bool_)):
        return str(int(v))
    if isinstance(v, (int, np.integer)):
        return str(int(v))
    if isinstance(v, (float, np.floating)):
        return repr(float(v))
    return str(v)


def write_csv(path, header, rows) -> None:
    with open(path, "w", newline="") as fh:
        w = csv.writer(fh, lineterminator="\n")
        w.writerow(header)
        for r in rows:
            w.writerow([_fmt(v) for v in r])


def read_csv(path) -> list:
    with open(path, newline="") as fh:
        return list(csv.DictReader(fh))


# ---------------------------------------------------------------------------
# pipeline


@dataclass
class RunManifest:
    config_hash: str
    version: str
    directory: str
    timings: dict = field(default_factory=dict)
    files: list = field(default_factory=list)
    checks: dict = field(default_factory=dict)
    cached: list = field(default_factory=list)

    def to_json(self) -> str:
        return json.dumps(asdict(self), indent=1, sort_keys=True)

    @classmethod
    def load(cls, path) -> "RunManifest":
        return cls(**json.loads(Path(path).read_text()))


class _Run:
    """Artifacts of one run directory, loaded or built on demand."""

    def __init__(self, cfg: ExperimentConfig, directory: Path, threads: int):
        self.cfg, self.dir, self.threads = cfg, directory, threads
        self.f = cfg.nonlinearity_obj()
        self._cache = {}
        self.checks = {}

    def path(self, name) -> Path:
        return self.dir / name

    def done(self, stage) -> bool:
        return self.path(f"{stage}.done.json").exists()

    def mark(self, stage, files, info) -> None:
        rec = {"stage": stage, "files": sorted(files), "checks": info}
        self.path(f"{stage}.done.json").write_text(json.dumps(rec, indent=1, sort_keys=True) + "\n")

    # -- loaders
    @property
    def profile(self):
        if "profile" not in self._cache:
            self._cache["profile"] = load_profile(self.path("profile.csv"))
        return self._cache["profile"]

    @property
    def pyramid(self):
        if "pyramid" not in self._cache:
            self._cache["pyramid"] = load_pyramid(self.path("pyramid.txt"))
        return self._cache["pyramid"]

    @property
    def surface(self):
        if "surface" not in self._cache:
            pyr = self.pyramid
            self._cache["surface"] = mollify_pyramid(build_mollifier(self.cfg.s, pyr.m_star), pyr)
        return self._cache["surface"]

    @property
    def r1_report(self):
        if "r1" not in self._cache:
            d = json.loads(self.path("r1.json").read_text())
            self._cache["r1"] = {k: np.asarray(v) if isinstance(v, list) else v for k, v in d.items()}
        return self._cache["r1"]

    @property
    def params(self):
        if "params" not in self._cache:
            self._cache["params"] = wavelab.SuperSolutionParams(**json.loads(self.path("params.json").read_text()))
        return self._cache["params"]

    @property
    def super_solution(self):
        d = json.loads(self.path("verify.json").read_text())
        return wavelab.SuperSolution(self.profile, self.surface, d["eps"], d["alpha"])

    # -- stages
    def stage_profile(self):
        cfg = self.cfg
        num = ProfileNumerics(M=cfg.profile.M, nodes=cfg.profile.nodes, tol=cfg.profile.tol, allow_half=cfg.s == 0.5)
        p = solve_profile(self.f, cfg.s, num)
        self._cache["profile"] = p
        save_profile(p, self.path("profile.csv"))
        self._cache["profile"] = load_profile(self.path("profile.csv"))
        rep = decay_report(p)
        write_csv(self.path("profile_decay.csv"), ["quantity", "side", "exponent", "constant", "rms"],
                  [(f.quantity, f.side, f.exponent, f.constant, f.residual) for f in rep["fits"]])
        s = cfg.s
        e = rep["exponents"]
        ok = abs(e["phi"] + 2 * s) <= 0.1 and abs(e["phi1"] + 1 + 2 * s) <= 0.1 and e["phi2"] <= -1 - 2 * s + 0.1
        info = {"profile_decay": {"passed": bool(ok), "k": p.k, **{f"exp_{k}": v for k, v in e.items()}}}
        return ["profile.csv", "profile_decay.csv"], info

    def stage_geometry(self):
        cfg, p = self.cfg, self.profile
        if cfg.balanced or p.k <= 0:
            raise ValueError("the planar speed must be positive to build a pyramid")
        pyr = make_regular_pyramid(cfg.pyramid.N, cfg.c_over_k * p.k, p.k)
        save_pyramid(pyr, self.path("pyramid.txt"))
        self._cache["pyramid"] = load_pyramid(self.path("pyramid.txt"))
        surf = self.surface
        moll = surf.mollifier
        aud = decay_audit(surf)
        write_csv(self.path("geometry_decay.csv"), ["quantity", "exponent", "target", "rms"],
                  [(q, v["exponent"], v["target"], v["rms"]) for q, v in aud["fits"].items()])
        rng = np.random.default_rng(cfg.sampling.seed)
        pts = rng.uniform(-40, 40, size=(1000, 2))
        d = surf.derivatives(pts[:, 0], pts[:, 1], 1)
        h = height(pyr, pts[:, 0], pts[:, 1])
        gnorm = np.linalg.norm(d.grad, axis=-1)
        S = surf.S(*rng.uniform(-60, 60, size=(1000, 2)).T)
        om = wavelab.omega_min(surf)
        rows = [
            ("P_slope_origin", -P_eval(moll, 0.0, 1), 0.5, abs(-P_eval(moll, 0.0, 1) - 0.5) <= 1e-8),
            ("P_seam", abs(P_eval(moll, moll.r0, 0, closed_form=False) - P_eval(moll, moll.r0)), 0.0,
             abs(P_eval(moll, moll.r0, 0, closed_form=False) - P_eval(moll, moll.r0)) <= 1e-8),
            ("normalization", moll.mass, 1.0, abs(moll.mass - 1) <= 1e-10),
            ("min_excess", float(np.min(d.phi - h)), 0.0, np.min(d.phi - h) > 0),
            ("max_excess", float(np.max(d.phi - h)), surf.excess_bound, np.max(d.phi - h) <= surf.excess_bound),
            ("max_grad", float(gnorm.max()), pyr.m_star, gnorm.max() < pyr.m_star),
            ("S_min", float(S.min()), 0.0, S.min() > 0),
            ("S_max", float(S.max()), pyr.c - pyr.k, S.max() <= pyr.c - pyr.k),
            ("S_apex", float(surf.S(0.0, 0.0)), pyr.c - pyr.k, abs(surf.S(0.0, 0.0) - (pyr.c - pyr.k)) <= 1e-8),
            ("omega", om["omega"], 0.0, om["omega"] > 0),
        ]
        write_csv(self.path("geometry_checks.csv"), ["check", "value", "target", "passed"], rows)
        moll_ok = all(r[3] for r in rows[:6])
        fits = aud["fits"]
        s_ok = all(r[3] for r in rows[6:9]) and all(abs(fits[q]["exponent"] + 2 * cfg.s) <= 0.15 for q in ("S", "fraclap_S"))
        info = {
            "mollifier": {"passed": bool(moll_ok), "min_excess": rows[3][1], "max_grad": rows[5][1]},
            "S_audit": {"passed": bool(s_ok), "exp_S": fits["S"]["exponent"], "exp_fraclap_S": fits["fraclap_S"]["exponent"]},
        }
        (self.path("geometry.json")).write_text(json.dumps({"m_star": pyr.m_star, "c": pyr.c, "k": pyr.k, "r0": moll.r0,
                                                            "omega": om["omega"], "omega_argmin": om["argmin"]},
                                                           indent=1, sort_keys=True) + "\n")
        return ["pyramid.txt", "geometry_decay.csv", "geometry_checks.csv", "geometry.json"], info

    def stage_r1(self):
        sm = self.cfg.sampling
        smp = wavelab.r1_samples(self.pyramid, lam=sm.r1_lambda, offsets=sm.r1_offsets)
        rep = wavelab.estimate_R1(self.profile, self.surface, alphas=sm.r1_alphas, samples=smp)
        self._cache["r1"] = rep
        rows = []
        for ia, a in enumerate(rep["alphas"]):
            for ic, (x, y) in enumerate(rep["columns"]):
                for io, o in enumerate(rep["offsets"]):
                    rows.append((a, ic, x, y, rep["lambda"][ic], o, rep["R1"][ia, ic, io], rep["error"][ia, ic, io]))
        write_csv(self.path("r1_samples.csv"), ["alpha", "column", "x", "y", "lambda", "offset", "R1", "error"], rows)
        fits = [("alpha", rep["alpha_fit"])]
        fits += [(f"lambda@{a!r}", f) for a, f in zip(rep["alphas"], rep["lambda_fits"])]
        fits += [(f"column@{i}", f) for i, f in enumerate(rep["column_alpha_fits"])]
        write_csv(self.path("r1_fits.csv"), ["fit", "exponent", "constant", "rms"],
                  [(n, f["exponent"], f["constant"], f["rms"]) for n, f in fits])
        keep = {k: (v.tolist() if isinstance(v, np.ndarray) else v) for k, v in rep.items()}
        self.path("r1.json").write_text(json.dumps(keep, sort_keys=True) + "\n")
        self._cache.pop("r1")
        s = self.cfg.s
        slope = rep["alpha_fit"]["exponent"]
        lam_ok = all(f["exponent"] <= -2 * s + 0.15 for f in rep["lambda_fits"])
        band = float(np.max(rep["z_band"]))
        ok = abs(slope + s) <= 0.15 and lam_ok and band <= 5 and rep["unresolved"] == 0
        info = {"R1_scaling": {"passed": bool(ok), "alpha_slope": slope,
                               "lambda_slopes": [f["exponent"] for f in rep["lambda_fits"]], "z_band": band,
                               "unresolved": rep["unresolved"]}}
        return ["r1_samples.csv", "r1_fits.csv", "r1.json"], info

    def stage_params(self):
        par = wavelab.select_parameters(self.profile, self.surface, self.f, self.r1_report)
        self._cache["params"] = par
        self.path("params.json").write_text(json.dumps(asdict(par), indent=1, sort_keys=True) + "\n")
        rows = [(k, v) for k, v in asdict(par).items() if not isinstance(v, dict)]
        rows += [(f"eps_term.{k}", v) for k, v in par.eps_terms.items()]
        rows += [(f"alpha_term.{k}", v) for k, v in par.alpha_terms.items()]
        write_csv(self.path("params.csv"), ["name", "value"], rows)
        return ["params.json", "params.csv"], {}

    def stage_verify(self):
        sm = self.cfg.sampling
        par = self.params
        sub = wavelab.SubSolution(self.profile, self.pyramid)
        rng = np.random.default_rng(sm.seed)
        pts = rng.uniform(-20, 20, size=(sm.sub_points, 3))
        rs = wavelab.residual_sub(sub, self.f, pts, max_error=np.inf)
        write_csv(self.path("verify_sub.csv"), ["x", "y", "z", "residual", "error"],
                  [(*p, r, e) for p, r, e in zip(pts, rs["residual"], rs["error"])])
        sup = wavelab.SuperSolution(self.profile, self.surface, par.eps, par.alpha)
        out = wavelab.verify_super(sup, par, self.f, sub, n=sm.verify_points, columns=sm.verify_columns, seed=sm.seed)
        sup = out["super"]
        write_csv(self.path("verify_super.csv"), ["x", "y", "z", "case", "LV", "S", "gap"],
                  [(*p, c, lv, S, g) for p, c, lv, S, g in zip(out["points"], out["case"], out["LV"], out["S"], out["gap"])])
        order = wavelab.ordering_check(sub, sup, n=sm.ordering_points, seed=sm.seed + 1)
        rec = {"eps": sup.eps, "alpha": sup.alpha, "accepted": out["accepted"], "attempts": out["attempts"],
               "min_LV": out["min_LV"], "min_gap": out["min_gap"], "case1_margin": out["case1_margin"],
               "case2_margin": out["case2_margin"], "ordering_min": order, "sub_residual": rs["max_abs"]}
        self.path("verify.json").write_text(json.dumps(rec, indent=1, sort_keys=True) + "\n")
        ok = out["accepted"] and order > 0 and out["case1_margin"] >= 0.9
        info = {"super_solution": {"passed": bool(ok), "min_LV": out["min_LV"], "min_gap": out["min_gap"],
                                   "case1_margin": out["case1_margin"], "retries": len(out["attempts"]) - 1,
                                   "ordering_min": order, "sub_residual": rs["max_abs"]}}
        return ["verify_sub.csv", "verify_super.csv", "verify.json"], info

    def stage_iterate(self):
        cfg = self.cfg
        it, box = cfg.iteration, cfg.box
        sub = wavelab.SubSolution(self.profile, self.pyramid)
        sup = self.super_solution
        icfg = wavelab.IterationConfig(L=box.L, n=box.n, K_factor=it.K_factor, tol=it.tol, max_m=it.max_m,
                                       base_alpha=it.base_alpha, r1_mode=it.r1_mode)
        res = wavelab.monotone_iterate(sub, sup, self.f, icfg, self.path("iteration.jsonl"))
        keys = ["m", "residual", "monotone_margin", "sub_margin", "super_margin", "inner_steps"]
        write_csv(self.path("iteration_history.csv"), keys, [[h[k] for k in keys] for h in res.history])
        export_field(res.u, self.path("u.fawf"), cfg.hash())
        rr = wavelab.iteration_residual(res, self.f, n=cfg.sampling.residual_points, seed=cfg.sampling.seed)
        write_csv(self.path("residual.csv"), ["x", "y", "z", "residual"],
                  [(*p, r) for p, r in zip(rr["points"], rr["residual"])])
        rows = wavelab.edge_convergence(res, (0.0, 2.0, 4.0, 8.0, 16.0))
        write_csv(self.path("gamma_R.csv"), ["R", "count", "sup_u_minus_v", "sup_V_minus_v"],
                  [(r["R"], r["count"], r["sup_u_minus_v"], r["sup_V_minus_v"]) for r in rows])
        hist = [h["residual"] for h in res.history]
        decreasing = all(b < a for a, b in zip(hist[1:], hist[2:]))
        mono = min(h["monotone_margin"] for h in res.history) >= -1e-10
        order = min(h["ordering_margin"] for h in res.history) >= -1e-10
        tab = [r["sup_u_minus_v"] for r in rows if r["R"] >= 2 and r["count"] > 0]
        gamma_ok = all(b <= a for a, b in zip(tab, tab[1:]))
        ok = res.converged and decreasing and mono and order and rr["max_abs"] <= 1e-4 and gamma_ok
        info = {"iteration": {"passed": bool(ok), "converged": res.converged, "steps": res.state.m,
                              "final_residual": hist[-1], "residual_decreasing": decreasing, "monotone": mono,
                              "ordered": order, "true_residual": rr["max_abs"], "gamma_R_nonincreasing": gamma_ok}}
        return ["iteration.jsonl", "iteration_history.csv", "u.fawf", "u.fawf.json", "residual.csv", "gamma_R.csv"], info


def _needed(stages) -> list:
    last = max(STAGES.index(s) for s in stages)
    return list(STAGES[: last + 1])


def run(config: ExperimentConfig, stages=None, force: bool = False, threads: int = 1) -> RunManifest:
    """Run ``stages`` (default all) and any missing upstream stage; returns and writes the manifest."""
    stages = list(stages or STAGES)
    unknown = [s for s in stages if s not in STAGES]
    if unknown:
        raise ValueError(f"unknown stages {unknown}")
    if config.balanced and any(s != "profile" for s in stages):
        raise ValueError("an odd nonlinearity has zero planar speed; only the profile stage applies")
    h = config.hash()
    directory = Path(config.output.directory) / h
    directory.mkdir(parents=True, exist_ok=True)
    (directory / "config.txt").write_text(config.to_text())
    man_path = directory / "manifest.json"
    man = RunManifest.load(man_path) if man_path.exists() else RunManifest(h, VERSION, str(directory))
    man.cached = []
    ctx = _Run(config, directory, threads)
    with fft.set_workers(max(1, threads)):
        for stage in _needed(stages):
            if ctx.done(stage) and not (force and stage in stages):
                man.cached.append(stage)
                continue
            t0 = time.perf_counter()
            files, info = getattr(ctx, f"stage_{stage}")()
            man.timings[stage] = time.perf_counter() - t0
            ctx.mark(stage, files, info)
    files, checks = [], {}
    for stage in STAGES:
        marker = directory / f"{stage}.done.json"
        if marker.exists():
            rec = json.loads(marker.read_text())
            files += rec["files"]
            checks.update(rec["checks"])
    man.files = sorted(set(files))
    man.checks = {name: checks.get(name, {"passed": None}) for name in CHECKS}
    man_path.write_text(man.to_json() + "\n")
    return man


def report(manifest: RunManifest) -> list:
    """summary.csv/summary.json with every acceptance check once, and schema.json for the CSVs present."""
    d = Path(manifest.directory)
    rows = []
    for name in CHECKS:
        c = manifest.checks.get(name, {"passed": None})
        status = "not_run" if c.get("passed") is None else ("pass" if c["passed"] else "fail")
        detail = ";".join(f"{k}={_fmt(v)}" for k, v in sorted(c.items()) if k != "passed" and not isinstance(v, list))
        rows.append((name, status, detail))
    write_csv(d / "summary.csv", ["check", "status", "detail"], rows)
    (d / "summary.json").write_text(json.dumps({"config_hash": manifest.config_hash, "version": manifest.version,
                                                "checks": {r[0]: r[1] for r in rows}}, indent=1, sort_keys=True) + "\n")
    present = sorted(p.name for p in d.glob("*.csv"))
    # column order matters here, so keys are not sorted
    (d / "schema.json").write_text(json.dumps({n: SCHEMA[n] for n in present if n in SCHEMA}, indent=1) + "\n")
    return present


# ---------------------------------------------------------------------------
# CLI

_COMMANDS = {
    "profile": ["profile"],
    "geometry": ["geometry"],
    "r1": ["r1"],
    "verify": ["params", "verify"],
    "iterate": ["iterate"],
    "all": list(STAGES),
}


def main(argv=None) -> int:
    ap = argparse.ArgumentParser(prog="pyrafront", description="pyramidal travelling fronts for the fractional Allen-Cahn equation")
    ap.add_argument("--config", help="key = value config file")
    ap.add_argument("--out", help=f"output directory (else ${OUT_ENV}, else the config value)")
    ap.add_argument("--threads", type=int, default=1, help="FFT worker threads")
    ap.add_argument("--force", action="store_true", help="recompute the named stages even if cached")
    ap.add_argument("command", choices=[*_COMMANDS, "report"])
    args = ap.parse_args(argv)
    try:
        cfg = load_config(args.config, args.out)
    except (ValueError, OSError) as e:
        print(f"config error: {e}", file=sys.stderr)
        return 2
    if args.command == "report":
        path = Path(cfg.output.directory) / cfg.hash() / "manifest.json"
        if not path.exists():
            print(f"no run found at {path.parent}", file=sys.stderr)
            return 1
        man = RunManifest.load(path)
    else:
        man = run(cfg, _COMMANDS[args.command], force=args.force, threads=args.threads)
    report(man)
    for name, c in man.checks.items():
        status = "not_run" if c.get("passed") is None else ("pass" if c["passed"] else "FAIL")
        print(f"{name:18s} {status}")
    print(f"outputs in {man.directory}")
    return 0


if __name__ == "__main__":
    sys.exit(main())
