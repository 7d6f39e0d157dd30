"""Command-line front end: ``gaussrde <subcommand> [--config FILE] [--set key=value ...]``.

Every run writes its numerical outputs (CSV/JSON) plus ``manifest.json``
into the output directory.  Wall-clock timing and versions live only in the
manifest, so the other files are byte-identical across reruns and worker
counts.

Exit codes: 0 success, 2 invalid configuration, 3 numerical failure,
4 NotCertified (``certify`` only).
"""

from __future__ import annotations

import argparse
import copy
import csv
import json
import platform
import sys
import time
from dataclasses import dataclass
from pathlib import Path

import numpy as np

from . import __version__
from .density import cross_check, estimate_density_many, kl_convergence_report, write_density_csv
from .errors import GaussRDEError, InvalidArgument
from .gaussian_driver import GridPath, HurstModel, TimeGrid, build_kl_basis, sample_array
from .positivity import CERTIFIED, CertifyOptions, certify, stable_hash, verify
from .rough_path import GeometricRoughPath, lift_increments, p_variation, write_csv
from .solvers import derivative_check, solve_variation, write_solution_csv
from .vector_fields import CATALOG, catalog, hormander_rank

SUBCOMMANDS = ("lift", "solve", "deriv-check", "kl-convergence", "certify", "density",
               "hormander", "cross-check")

EXIT_OK, EXIT_CONFIG, EXIT_NUMERICAL, EXIT_NOT_CERTIFIED = 0, 2, 3, 4

DEFAULTS = {
    "H": 0.4,
    "p": None,
    "T": 1.0,
    "K": 64,
    "t": None,
    "d": None,
    "e": None,
    "vector_fields": {"name": "elliptic-rot2d", "params": {}},
    "a": None,
    "z": None,
    "N": 8,
    "N_sim": 32,
    "N_list": [4, 8, 16, 32],
    "n_samples": 1000,
    "r": 2.0,
    "seed": 0,
    "substeps": 8,
    "level": None,
    "bandwidth": "auto",
    "certify": {"n_starts": 8, "start_radius": 1.0, "max_iter": 100, "eps_res": None,
                "delta_rank_rel": 1e-8, "N_rank": None},
    "deriv_check": {"n_pairs": 20, "N": 8, "eps": 1e-3, "direction_scale": 8.0},
    "out_dir": "out",
    "workers": 1,
}

#: Keys that do not change numerical results and are left out of the hash.
NON_SEMANTIC = ("out_dir", "workers")


class ConfigError(InvalidArgument):
    """A configuration field is missing, malformed or out of range."""

    def __init__(self, field, message):
        super().__init__(f"{field}: {message}")
        self.field = field


def _merge(base, update, prefix=""):
    out = copy.deepcopy(base)
    for key, value in update.items():
        path = prefix + key
        if key not in base:
            raise ConfigError(path, "unknown configuration key")
        if isinstance(base[key], dict) and key != "vector_fields":
            if not isinstance(value, dict):
                raise ConfigError(path, "expected an object")
            out[key] = _merge(base[key], value, path + ".")
        else:
            out[key] = value
    return out


def _set_dotted(raw, key, value):
    parts = key.split(".")
    node = raw
    for part in parts[:-1]:
        node = node.setdefault(part, {})
        if not isinstance(node, dict):
            raise ConfigError(key, "cannot set a field inside a non-object")
    node[parts[-1]] = value


def parse_override(text):
    """``key=value`` with a JSON value; bare words are taken as strings."""
    if "=" not in text:
        raise ConfigError(text, "override must look like key=value")
    key, value = text.split("=", 1)
    try:
        parsed = json.loads(value)
    except json.JSONDecodeError:
        parsed = value
    return key.strip(), parsed


def _num(raw, key, kind=float, positive=False, allow_none=False):
    value = raw[key]
    if value is None and allow_none:
        return None
    if isinstance(value, bool) or not isinstance(value, (int, float)):
        raise ConfigError(key, f"expected a number, got {value!r}")
    if kind is int and value != int(value):
        raise ConfigError(key, f"expected an integer, got {value!r}")
    value = kind(value)
    if positive and value <= 0:
        raise ConfigError(key, f"must be positive, got {value}")
    return value


def _vector(value, key, e):
    try:
        v = np.asarray(value, dtype=float)
    except (TypeError, ValueError):
        raise ConfigError(key, f"expected a list of numbers, got {value!r}") from None
    if v.shape[-1:] != (e,) or v.ndim not in (1, 2) or not np.all(np.isfinite(v)):
        raise ConfigError(key, f"expected {e} finite components per point, got {value!r}")
    return v


@dataclass(frozen=True, eq=False)
class ExperimentConfig:
    raw: dict
    model: HurstModel
    grid: TimeGrid
    t: float
    vf: object
    a: np.ndarray
    z: np.ndarray | None

    @classmethod
    def from_dict(cls, data):
        raw = _merge(DEFAULTS, data)
        for key in ("H", "T"):
            raw[key] = _num(raw, key, positive=True)
        raw["p"] = _num(raw, "p", allow_none=True)
        raw["K"] = _num(raw, "K", int, positive=True)
        try:
            model = HurstModel(raw["H"], raw["p"])
        except InvalidArgument as exc:
            raise ConfigError("H", str(exc)) from None
        try:
            grid = TimeGrid(raw["T"], raw["K"])
        except InvalidArgument as exc:
            raise ConfigError("K", str(exc)) from None
        t = raw["T"] if raw["t"] is None else _num(raw, "t")
        if not (0 < t <= raw["T"]):
            raise ConfigError("t", f"must lie in (0, T] = (0, {raw['T']}], got {t}")
        try:
            grid.index_of(t)
        except InvalidArgument as exc:
            raise ConfigError("t", str(exc)) from None
        raw["t"] = float(t)

        spec = raw["vector_fields"]
        if not isinstance(spec, dict) or "name" not in spec:
            raise ConfigError("vector_fields", "expected {\"name\": ..., \"params\": {...}}")
        if spec["name"] not in CATALOG:
            raise ConfigError("vector_fields.name", f"unknown system {spec['name']!r}; "
                                                    f"choose from {sorted(CATALOG)}")
        try:
            vf = catalog(spec["name"], **spec.get("params", {}))
        except InvalidArgument as exc:
            raise ConfigError("vector_fields.params", str(exc)) from None
        raw["vector_fields"] = {"name": spec["name"], "params": spec.get("params", {})}
        for key, actual in (("d", vf.d), ("e", vf.e)):
            if raw[key] is not None and raw[key] != actual:
                raise ConfigError(key, f"vector fields have {key} = {actual}, config says {raw[key]}")
            raw[key] = actual

        a = np.zeros(vf.e) if raw["a"] is None else _vector(raw["a"], "a", vf.e)
        if a.ndim != 1:
            raise ConfigError("a", "start point must be a single vector")
        raw["a"] = a.tolist()
        z = None if raw["z"] is None else _vector(raw["z"], "z", vf.e)
        raw["z"] = None if z is None else z.tolist()

        for key in ("N", "N_sim", "n_samples", "seed", "substeps", "workers"):
            raw[key] = _num(raw, key, int)
        for key in ("N", "N_sim", "substeps", "workers"):
            if raw[key] < 1:
                raise ConfigError(key, f"must be at least 1, got {raw[key]}")
        if raw["n_samples"] < 0:
            raise ConfigError("n_samples", "must be non-negative")
        for key in ("N", "N_sim"):
            if raw[key] > raw["K"]:
                raise ConfigError(key, f"cannot exceed the number of grid modes K = {raw['K']}")
        if not isinstance(raw["N_list"], list) or not raw["N_list"]:
            raise ConfigError("N_list", "expected a non-empty list of truncations")
        raw["N_list"] = [int(n) for n in raw["N_list"]]
        if any(b <= a_ for a_, b in zip(raw["N_list"], raw["N_list"][1:])):
            raise ConfigError("N_list", "must be strictly increasing")
        if raw["N_list"][0] < 1 or raw["N_list"][-1] > raw["K"]:
            raise ConfigError("N_list", f"entries must lie in [1, K = {raw['K']}]")
        raw["r"] = _num(raw, "r")
        if not (1 <= raw["r"] <= 8):
            raise ConfigError("r", f"moment order must lie in [1, 8], got {raw['r']}")
        if raw["level"] is not None and raw["level"] not in (1, 2, 3):
            raise ConfigError("level", "must be 1, 2 or 3")
        bw = raw["bandwidth"]
        if not (bw == "auto" or (isinstance(bw, (int, float)) and not isinstance(bw, bool) and bw > 0)):
            raise ConfigError("bandwidth", f"must be a positive number or \"auto\", got {bw!r}")
        if not isinstance(raw["out_dir"], str):
            raise ConfigError("out_dir", "expected a path string")
        return cls(raw, model, grid, float(t), vf, a, z)

    @property
    def level(self):
        return self.raw["level"] or self.model.level

    @property
    def semantic(self):
        return {k: v for k, v in self.raw.items() if k not in NON_SEMANTIC}

    @property
    def hash(self):
        return stable_hash(self.semantic)

    def require_z(self, single=True):
        if self.z is None:
            raise ConfigError("z", "a target point is required for this subcommand")
        if single and self.z.ndim != 1:
            raise ConfigError("z", "expected a single target point")
        return self.z

    def certify_options(self):
        c = self.raw["certify"]
        return CertifyOptions(n_starts=int(c["n_starts"]), start_radius=float(c["start_radius"]),
                              max_iter=int(c["max_iter"]), eps_res=c["eps_res"],
                              delta_rank_rel=float(c["delta_rank_rel"]), seed=self.raw["seed"],
                              substeps=self.raw["substeps"], N_rank=c["N_rank"],
                              workers=self.raw["workers"])


def load_config(path=None, overrides=(), seed=None, workers=None, out_dir=None):
    """Read a JSON config, apply ``--set`` overrides and flags, and validate."""
    data = {}
    if path is not None:
        try:
            data = json.loads(Path(path).read_text())
        except OSError as exc:
            raise ConfigError("config", f"cannot read {path}: {exc.strerror}") from None
        except json.JSONDecodeError as exc:
            raise ConfigError("config", f"invalid JSON: {exc}") from None
        if not isinstance(data, dict):
            raise ConfigError("config", "top level must be an object")
    for text in overrides:
        key, value = parse_override(text)
        _set_dotted(data, key, value)
    for key, value in (("seed", seed), ("workers", workers), ("out_dir", out_dir)):
        if value is not None:
            data[key] = value
    return ExperimentConfig.from_dict(data)


# --- subcommands -------------------------------------------------------------

def _write_json(path, payload):
    path.write_text(json.dumps(payload, indent=2, sort_keys=True) + "\n")


def _driver(cfg, N=None):
    """One fBM sample on the config grid, optionally projected to N KL modes."""
    values = sample_array(cfg.grid, cfg.raw["H"], 1, cfg.raw["seed"], cfg.vf.d)[0]
    if N is not None:
        basis = build_kl_basis(cfg.grid, cfg.raw["H"], cfg.vf.d)
        values = basis.realize(basis.coefficients(values, N))
    return values


def cmd_lift(cfg, out):
    values = _driver(cfg)
    x = GeometricRoughPath(cfg.grid, *lift_increments(values, cfg.level), p=cfg.model.p)
    write_csv(x, out / "lift.csv")
    norms = {str(i): p_variation(x, i, cfg.model.p) for i in range(1, x.level + 1)}
    summary = {"kind": "lift", "schema_version": 1, "level": x.level, "p": cfg.model.p,
               "d": x.d, "K": cfg.grid.K, "p_variation": norms}
    _write_json(out / "lift.json", summary)
    return EXIT_OK, summary


def cmd_solve(cfg, out):
    incs = lift_increments(_driver(cfg), cfg.level)
    basis = build_kl_basis(cfg.grid, cfg.raw["H"], cfg.vf.d)
    first = np.zeros((1, cfg.vf.d))
    first[0, 0] = 1.0
    direction = GridPath(cfg.grid, basis.realize(first))
    bundle = solve_variation(GeometricRoughPath(cfg.grid, *incs), direction, cfg.vf, cfg.a)
    write_solution_csv(bundle.y, out / "solution.csv", bundle)
    summary = {"kind": "solve", "schema_version": 1, "method": bundle.y.method, "level": cfg.level,
               "final": bundle.y.final.tolist(),
               "direction": "first KL mode in driver component 0"}
    _write_json(out / "solve.json", summary)
    return EXIT_OK, summary


def cmd_deriv_check(cfg, out):
    dc = cfg.raw["deriv_check"]
    basis = build_kl_basis(cfg.grid, cfg.raw["H"], cfg.vf.d)
    N = basis.check_truncation(int(dc["N"]))
    n = int(dc["n_pairs"])
    rng = np.random.default_rng(np.random.SeedSequence(cfg.raw["seed"]))
    h = basis.realize(rng.standard_normal((n, N, cfg.vf.d)))
    l = basis.realize(float(dc["direction_scale"]) * rng.standard_normal((n, N, cfg.vf.d)))
    res = derivative_check(h, l, cfg.vf, cfg.a, cfg.grid, float(dc["eps"]), cfg.raw["substeps"])
    with open(out / "deriv_check.csv", "w", newline="") as f:
        w = csv.writer(f)
        w.writerow(["pair", "xi1_ratio", "xi1_exact", "xi2_ratio", "xi2_exact", "duhamel_diff"])
        for i in range(n):
            w.writerow([i, repr(float(res["xi1"]["ratio"][i])), bool(res["xi1"]["exact"][i]),
                        repr(float(res["xi2"]["ratio"][i])), bool(res["xi2"]["exact"][i]),
                        repr(float(res["duhamel_diff"][i]))])

    def ok(q):
        r = q["ratio"]
        return bool(np.all(q["exact"] | ((r >= 3.5) & (r <= 4.5))))

    summary = {"kind": "deriv-check", "schema_version": 1, "n_pairs": n, "eps": float(dc["eps"]),
               "xi1_pass": ok(res["xi1"]), "xi2_pass": ok(res["xi2"]),
               "duhamel_max_diff": float(np.max(res["duhamel_diff"]))}
    _write_json(out / "deriv_check.json", summary)
    return EXIT_OK, summary


def cmd_kl_convergence(cfg, out):
    rep = kl_convergence_report(cfg.raw["H"], cfg.raw["p"], cfg.raw["N_list"], cfg.raw["n_samples"],
                                cfg.raw["r"], cfg.raw["seed"], cfg.grid, d=cfg.vf.d,
                                workers=cfg.raw["workers"])
    rep.write_csv(out / "kl_convergence.csv")
    _write_json(out / "kl_convergence.json", rep.to_json())
    return EXIT_OK, {"kind": "kl-convergence", "lemma_max_residual": rep.lemma_max_residual}


def _certify(cfg):
    basis = build_kl_basis(cfg.grid, cfg.raw["H"], cfg.vf.d)
    cert = certify(cfg.require_z(), cfg.t, cfg.vf, cfg.a, basis, cfg.raw["N"], cfg.certify_options())
    verified = verify(cert, cfg.vf, cfg.a, basis) if cert.verdict == CERTIFIED else False
    return cert, verified


def cmd_certify(cfg, out):
    cert, verified = _certify(cfg)
    _write_json(out / "certificate.json", cert.to_json())
    summary = {"kind": "certify", "verdict": cert.verdict, "residual": cert.residual,
               "lambda_min": cert.lambda_min, "verified": verified}
    return (EXIT_OK if cert.verdict == CERTIFIED else EXIT_NOT_CERTIFIED), summary


def _density(cfg, zs):
    bw = cfg.raw["bandwidth"]
    return estimate_density_many(zs, cfg.t, cfg.vf, cfg.a, cfg.raw["H"], cfg.raw["N_sim"],
                                 cfg.raw["n_samples"], bw, cfg.raw["seed"], cfg.grid,
                                 cfg.raw["substeps"], cfg.raw["workers"])


def cmd_density(cfg, out):
    zs = np.atleast_2d(cfg.require_z(single=False))
    ests = _density(cfg, zs)
    write_density_csv(ests, out / "density.csv")
    _write_json(out / "density.json", {"kind": "density", "schema_version": 1,
                                       "estimates": [e.to_json() for e in ests]})
    return EXIT_OK, {"kind": "density", "estimates": [e.estimate for e in ests]}


def cmd_hormander(cfg, out):
    rank, depth = hormander_rank(cfg.vf, cfg.a)
    summary = {"kind": "hormander", "schema_version": 1, "rank": rank, "depth": depth,
               "e": cfg.vf.e, "satisfied": rank == cfg.vf.e}
    _write_json(out / "hormander.json", summary)
    return EXIT_OK, summary


def cmd_cross_check(cfg, out):
    cert, _ = _certify(cfg)
    est = _density(cfg, cfg.require_z()[None, :])[0]
    report = cross_check(cert, est)
    _write_json(out / "certificate.json", cert.to_json())
    _write_json(out / "density.json", est.to_json())
    _write_json(out / "cross_check.json", report)
    return EXIT_OK, {"kind": "cross-check", "status": report["status"]}


COMMANDS = {
    "lift": cmd_lift,
    "solve": cmd_solve,
    "deriv-check": cmd_deriv_check,
    "kl-convergence": cmd_kl_convergence,
    "certify": cmd_certify,
    "density": cmd_density,
    "hormander": cmd_hormander,
    "cross-check": cmd_cross_check,
}


def _error(kind, exc, code):
    payload = {"error": kind, "type": type(exc).__name__, "message": str(exc), "exit_code": code}
    if isinstance(exc, ConfigError):
        payload["field"] = exc.field
    print(json.dumps(payload, sort_keys=True), file=sys.stderr)
    return code


def run(subcommand, config_path=None, overrides=(), seed=None, workers=None, out_dir=None):
    """Execute one subcommand; returns the process exit code."""
    started = time.time()
    try:
        if subcommand not in COMMANDS:
            raise ConfigError("subcommand", f"unknown subcommand {subcommand!r}")
        cfg = load_config(config_path, overrides, seed, workers, out_dir)
    except InvalidArgument as exc:
        return _error("invalid-config", exc, EXIT_CONFIG)
    out = Path(cfg.raw["out_dir"])
    out.mkdir(parents=True, exist_ok=True)
    try:
        code, summary = COMMANDS[subcommand](cfg, out)
    except InvalidArgument as exc:
        return _error("invalid-config", exc, EXIT_CONFIG)
    except GaussRDEError as exc:
        return _error("numerical-failure", exc, EXIT_NUMERICAL)
    manifest = {
        "subcommand": subcommand,
        "config": cfg.raw,
        "config_hash": cfg.hash,
        "exit_code": code,
        "versions": {"gaussrde": __version__, "numpy": np.__version__,
                     "python": platform.python_version()},
        "started_at": time.strftime("%Y-%m-%dT%H:%M:%SZ", time.gmtime(started)),
        "wall_time_s": time.time() - started,
        "outputs": sorted(p.name for p in out.iterdir() if p.name != "manifest.json"),
    }
    _write_json(out / "manifest.json", manifest)
    print(json.dumps(summary, sort_keys=True))
    return code


def build_parser():
    parser = argparse.ArgumentParser(prog="gaussrde", description=__doc__.splitlines()[0])
    parser.add_argument("subcommand", choices=SUBCOMMANDS)
    parser.add_argument("--config", help="JSON configuration file")
    parser.add_argument("--set", dest="overrides", action="append", default=[], metavar="KEY=VALUE",
                        help="override a config field; dotted keys reach nested fields, values are JSON")
    parser.add_argument("--out-dir", help="directory for outputs (default: out)")
    parser.add_argument("--workers", type=int, help="worker threads; results do not depend on it")
    parser.add_argument("--seed", type=int, help="random seed")
    return parser


def main(argv=None):
    args = build_parser().parse_args(argv)
    return run(args.subcommand, args.config, args.overrides, args.seed, args.workers, args.out_dir)


if __name__ == "__main__":
    sys.exit(main())
