"""Command line pipeline: validate, tune, certify, simulate, analyze, report.

Every command reads one TOML run configuration (see ``configs/`` and the
README for the schema); ``--set section.key=value`` overrides any field.
Outputs go to the configured directory::

    params.json
    reports/   certification, analysis and summary documents (JSON, Markdown)
    snapshots/ binary field dumps plus index.json
    csv/       residual tables, profiles, energy series, snapshot tables
    manifest.json  SHA-256 of every other file

Exit codes: 0 success, 1 validation or tuning failure (or a failed check),
2 numerical failure.
"""

from __future__ import annotations

import argparse
import hashlib
import json
import sys
from dataclasses import asdict, dataclass, field
from pathlib import Path

import numpy as np

try:
    import tomllib
except ModuleNotFoundError:  # Python < 3.11
    import tomli as tomllib

from . import analysis as an
from . import barriers as br
from . import curve as cv
from . import solver as sv
from .params import (BarrierParams, ConstraintViolation, ExponentConfig, ExponentViolation,
                     SearchOptions, TuneFailure, derive_structural, min_K, tune_constants,
                     validate_exponents)

EXIT_OK, EXIT_FAIL, EXIT_NUMERIC = 0, 1, 2


class ConfigError(ValueError):
    """Unparseable or incomplete configuration; the message names the field."""


# -- configuration ------------------------------------------------------------

@dataclass
class GridOptions:
    indices: list[int] = field(default_factory=lambda: [3])
    n_r: int = 512
    n_theta: int = 0


@dataclass
class RunOptions:
    T: float = 1.0
    modes: list[str] = field(default_factory=lambda: ["sub", "super"])
    save_every: int = 10
    initial: str = "midpoint"
    window: list[float] | None = None
    rel_tol: float = 1e-2


@dataclass
class OutputOptions:
    dir: str = "out"
    formats: list[str] = field(default_factory=lambda: ["json", "csv", "bin"])


@dataclass
class RunConfig:
    exponents: ExponentConfig
    tuning: SearchOptions = field(default_factory=SearchOptions)
    stepper: sv.StepperOptions = field(default_factory=sv.StepperOptions)
    grid: GridOptions = field(default_factory=GridOptions)
    curve: dict = field(default_factory=lambda: {"name": "stationary"})
    run: RunOptions = field(default_factory=RunOptions)
    output: OutputOptions = field(default_factory=OutputOptions)

    @property
    def out(self) -> Path:
        return Path(self.output.dir)

    def to_dict(self) -> dict:
        return {"exponents": self.exponents.to_dict(), "tuning": asdict(self.tuning),
                "stepper": asdict(self.stepper), "grid": asdict(self.grid),
                "curve": self.curve, "run": asdict(self.run), "output": asdict(self.output)}


EXPONENT_KEYS = ("n", "p", "lambda", "lambda_prime", "k", "k_prime")
INITIAL_DATA = ("midpoint", "lower", "upper")


def _parse_value(text: str):
    try:
        return tomllib.loads(f"v = {text}")["v"]
    except tomllib.TOMLDecodeError:
        return text


def apply_overrides(doc: dict, overrides: list[str]) -> dict:
    for item in overrides:
        if "=" not in item:
            raise ConfigError(f"override {item!r}: expected section.key=value")
        path, text = item.split("=", 1)
        keys = path.strip().split(".")
        node = doc
        for k in keys[:-1]:
            node = node.setdefault(k, {})
            if not isinstance(node, dict):
                raise ConfigError(f"override {item!r}: {k} is not a table")
        node[keys[-1]] = _parse_value(text.strip())
    return doc


def _section(doc, name, cls):
    raw = doc.get(name, {})
    if not isinstance(raw, dict):
        raise ConfigError(f"[{name}] must be a table")
    known = set(cls.__dataclass_fields__)
    for key in raw:
        if key not in known:
            raise ConfigError(f"unknown field {name}.{key}")
    try:
        return cls(**raw)
    except (TypeError, ValueError) as exc:
        raise ConfigError(f"[{name}]: {exc}") from None


def parse_config(doc: dict) -> RunConfig:
    """Build a RunConfig from a parsed TOML document, naming the first bad field."""
    ex = doc.get("exponents")
    if not isinstance(ex, dict):
        raise ConfigError("missing table [exponents]")
    for key in EXPONENT_KEYS:
        if key not in ex:
            raise ConfigError(f"missing field exponents.{key}")
        if not isinstance(ex[key], (int, float)) or isinstance(ex[key], bool):
            raise ConfigError(f"exponents.{key} must be a number (got {ex[key]!r})")
    extra = set(ex) - set(EXPONENT_KEYS)
    if extra:
        raise ConfigError(f"unknown field exponents.{sorted(extra)[0]}")
    cfg = ExponentConfig.from_dict(ex)
    grid = _section(doc, "grid", GridOptions)
    if isinstance(grid.indices, int):
        grid.indices = [grid.indices]
    run = _section(doc, "run", RunOptions)
    if run.initial not in INITIAL_DATA:
        raise ConfigError(f"run.initial must be one of {INITIAL_DATA} (got {run.initial!r})")
    for m in run.modes:
        if m not in ("sub", "super"):
            raise ConfigError(f"run.modes entries must be 'sub' or 'super' (got {m!r})")
    curve = doc.get("curve", {"name": "stationary"})
    if not isinstance(curve, dict) or "name" not in curve:
        raise ConfigError("missing field curve.name")
    return RunConfig(
        exponents=cfg,
        tuning=_section(doc, "tuning", SearchOptions),
        stepper=_section(doc, "stepper", sv.StepperOptions),
        grid=grid,
        curve=dict(curve),
        run=run,
        output=_section(doc, "output", OutputOptions),
    )


def load_config(path, overrides=(), out_dir=None) -> RunConfig:
    try:
        with open(path, "rb") as fh:
            doc = tomllib.load(fh)
    except tomllib.TOMLDecodeError as exc:
        raise ConfigError(f"{path}: {exc}") from None
    except OSError as exc:
        raise ConfigError(f"{path}: {exc.strerror}") from None
    doc = apply_overrides(doc, list(overrides))
    if out_dir is not None:
        doc.setdefault("output", {})["dir"] = str(out_dir)
    return parse_config(doc)


# -- file helpers -----------------------------------------------------------------

def _json_default(o):
    if isinstance(o, (np.floating, np.integer, np.bool_)):
        return o.item()
    if isinstance(o, np.ndarray):
        return o.tolist()
    raise TypeError(f"not serializable: {type(o).__name__}")


def write_json(path: Path, obj) -> None:
    path.parent.mkdir(parents=True, exist_ok=True)
    path.write_text(json.dumps(obj, indent=2, sort_keys=True, default=_json_default) + "\n")


def read_json(path: Path):
    return json.loads(path.read_text())


def write_manifest(out: Path) -> dict:
    files = {}
    for p in sorted(out.rglob("*")):
        if p.is_file() and p.name != "manifest.json":
            files[p.relative_to(out).as_posix()] = hashlib.sha256(p.read_bytes()).hexdigest()
    write_json(out / "manifest.json", {"sha256": files})
    return files


def initial_datum(cfg: ExponentConfig, kind: str):
    if kind == "lower":
        return lambda r: br.lower_envelope(cfg, r)
    if kind == "upper":
        return lambda r: br.upper_envelope(cfg, r)
    return lambda r: 0.5 * (br.lower_envelope(cfg, r) + br.upper_envelope(cfg, r))


def load_params(rc: RunConfig, path=None) -> BarrierParams:
    p = Path(path) if path else rc.out / "params.json"
    if not p.exists():
        raise ConfigError(f"{p} not found; run 'tune' first or pass --params")
    return BarrierParams.from_dict(read_json(p))


def make_curve(rc: RunConfig, prm: BarrierParams) -> cv.Trajectory:
    try:
        return cv.from_config(rc.curve, 2 if rc.grid.n_theta else rc.exponents.n, prm.A, prm.c_xi)
    except (KeyError, TypeError, ValueError) as exc:
        raise ConfigError(f"[curve]: {exc}") from None


def _say(msg: str) -> None:
    print(msg, flush=True)


# -- commands -----------------------------------------------------------------------

def cmd_validate(rc: RunConfig, args) -> int:
    cfg = validate_exponents(rc.exponents)
    s = rc.tuning
    sigma = s.fixed_sigma if s.fixed_sigma is not None else s.sigma_start
    c_xi = s.fixed_c_xi if s.fixed_c_xi is not None else s.c_xi_start
    A = s.fixed_A if s.fixed_A is not None else s.A_start
    K = s.K_margin * min_K(cfg)
    prm = derive_structural(cfg, sigma=sigma, K=K, c_xi=c_xi, A=A)
    _say(f"exponents valid: 0 < lambda={cfg.lam} < (p-n)/(p-1)={cfg.critical:.6g} "
         f"< lambda'={cfg.lam_prime} < 1, k={cfg.k} > k'={cfg.k_prime} > 0")
    _say(f"R = lambda'/lambda = {prm.R:.12g}")
    _say(f"theta = {prm.theta:.12g}")
    _say(f"min_K = {min_K(cfg):.12g}")
    _say(f"delta = {prm.delta:.12g} (sigma = {sigma})")
    if args.params or (rc.out / "params.json").exists():
        prm = load_params(rc, args.params)
        label = "tuned"
    else:
        label = "provisional"
    traj = make_curve(rc, prm)
    ok, worst = cv.admissible(traj, prm.c_xi, prm.A, max(rc.run.T, 1e-12))
    _say(f"curve {traj.name}: worst speed ratio {worst:.6g} with {label} "
         f"C_xi={prm.c_xi:.6g}, A={prm.A:.6g} -> {'admissible' if ok else 'NOT admissible'}")
    return EXIT_OK if ok else EXIT_FAIL


def cmd_tune(rc: RunConfig, args) -> int:
    out = rc.out
    try:
        prm = tune_constants(rc.exponents, rc.tuning)
    except TuneFailure as exc:
        write_json(out / "reports" / "tune_failure.json",
                   {"check": exc.check, "anchor": br.ANCHORS.get(exc.check.split(".")[0], ""),
                    "message": str(exc)})
        _say(f"tuning failed: {exc}")
        return EXIT_FAIL
    write_json(out / "params.json", prm.to_dict())
    grid = rc.tuning.grid()
    report = br.certify(prm, grid, margin=rc.tuning.check_margin)
    write_json(out / "reports" / "certification.json", report.to_dict())
    if "csv" in rc.output.formats:
        (out / "csv").mkdir(parents=True, exist_ok=True)
        br.residual_table(prm, grid, out / "csv" / "residuals.csv")
    _say(f"K={prm.K:.12g} A={prm.A:.12g} C_xi={prm.c_xi:.12g} sigma={prm.sigma:.12g} "
         f"delta={prm.delta:.12g}")
    _say(f"certification: {'pass' if report.passed else 'FAIL'}")
    return EXIT_OK if report.passed else EXIT_FAIL


def cmd_certify(rc: RunConfig, args) -> int:
    prm = load_params(rc, args.params)
    report = br.certify(prm, rc.tuning.grid(), margin=rc.tuning.check_margin)
    write_json(rc.out / "reports" / "certification.json", report.to_dict())
    for c in report.checks:
        _say(f"{'pass' if c.passed else 'FAIL'}  {c.name:34s} worst margin {c.worst_margin:.3e}")
    return EXIT_OK if report.passed else EXIT_FAIL


def _run_name(i, mode):
    return f"i{i}_{mode}"


def cmd_simulate(rc: RunConfig, args) -> int:
    prm = load_params(rc, args.params)
    traj = make_curve(rc, prm)
    ok, worst = cv.admissible(traj, prm.c_xi, prm.A, rc.run.T)
    if not ok:
        _say(f"curve {traj.name} violates the speed bound (worst ratio {worst:.6g})")
        return EXIT_FAIL
    v0 = initial_datum(rc.exponents, rc.run.initial)
    snap = rc.out / "snapshots"
    snap.mkdir(parents=True, exist_ok=True)
    index = {"runs": {}, "curve": traj.describe(), "initial": rc.run.initial}
    for i in rc.grid.indices:
        for mode in rc.run.modes:
            stats: list = []
            run = sv.solve_on_annulus(i, rc.run.T, mode, v0, rc.stepper, prm, traj,
                                      rc.grid.n_r, rc.grid.n_theta, rc.run.save_every,
                                      stats=stats)
            name = _run_name(i, mode)
            files = []
            for k, f in enumerate(run):
                base = f"{name}_{k:04d}"
                if "bin" in rc.output.formats:
                    sv.write_snapshot(f, snap / f"{base}.bin")
                if "csv" in rc.output.formats:
                    (rc.out / "csv").mkdir(exist_ok=True)
                    sv.write_snapshot_csv(f, rc.out / "csv" / f"{base}.csv")
                files.append({"file": f"{base}.bin", "time": f.time})
            worst_slack = min((s.energy_inequality_slack for s in stats
                               if not s.drift and not s.boundary_changed), default=None)
            index["runs"][name] = {"index": i, "mode": mode, "snapshots": files,
                                   "steps": len(stats),
                                   "newton_iterations": sum(s.iterations for s in stats),
                                   "clamped": run[-1].clamped,
                                   "min_energy_slack_fixed_boundary": worst_slack}
            _say(f"{name}: {len(stats)} steps, {len(run)} snapshots, "
                 f"{sum(s.iterations for s in stats)} inner iterations")
    write_json(snap / "index.json", index)
    return EXIT_OK


def load_runs(rc: RunConfig) -> dict:
    snap = rc.out / "snapshots"
    idx_path = snap / "index.json"
    if not idx_path.exists():
        raise ConfigError(f"{idx_path} not found; run 'simulate' first")
    index = read_json(idx_path)
    runs = {}
    for name, meta in index["runs"].items():
        runs[meta["index"], meta["mode"]] = [sv.read_snapshot(snap / s["file"])
                                            for s in meta["snapshots"]]
    return runs


def cmd_analyze(rc: RunConfig, args) -> int:
    prm = load_params(rc, args.params)
    traj = make_curve(rc, prm)
    runs = load_runs(rc)
    v0 = initial_datum(rc.exponents, rc.run.initial)
    report = {"runs": {}, "config": rc.to_dict()}
    moving = traj.name != "stationary"
    for (i, mode), run in sorted(runs.items()):
        name = _run_name(i, mode)
        entry = an.analyze_run(run, prm, traj if moving else None, rc.run.window, rc.run.rel_tol)
        entry["continuity"] = {"anchor": "continuity at t = 0",
                               **an.initial_continuity_check(run, v0).to_dict()}
        report["runs"][name] = entry
        if "csv" in rc.output.formats:
            _profile_csv(run[-1], rc.out / "csv" / f"{name}_profile.csv")
            np.savetxt(rc.out / "csv" / f"{name}_energy.csv",
                       np.asarray(entry["energy"]["series"]), delimiter=",",
                       header="t,energy", comments="", fmt="%.17g")
    modes = {m for _, m in runs}
    if modes == {"sub", "super"}:
        report["chain"] = sv.chain_report(runs, prm, rc.run.rel_tol).to_dict()
    write_json(rc.out / "reports" / "analysis.json", report)
    failed = [k for k, e in report["runs"].items()
              for c in ("sandwich", "growth", "gradient_blowup") if not e[c]["passed"]]
    if "chain" in report and not report["chain"]["passed"]:
        failed.append("chain")
    for name, e in report["runs"].items():
        _say(f"{name}: sandwich {'pass' if e['sandwich']['passed'] else 'FAIL'}, "
             f"growth slope {e['growth']['slope']:.4f}, "
             f"gradient slope {e['gradient_blowup']['slope']:.4f}"
             f"{' (monotone)' if e['gradient_blowup']['monotone'] else ''}")
    return EXIT_OK if not failed else EXIT_FAIL


def _profile_csv(f: sv.Field, path: Path) -> None:
    path.parent.mkdir(parents=True, exist_ok=True)
    v = an.ring_average(f)
    g = an.gradient_magnitude(f)
    g = g.mean(axis=1) if f.grid.n_theta else g
    with np.errstate(divide="ignore"):
        cols = np.column_stack([np.log(f.grid.r), np.log(v), np.log(g)])
    np.savetxt(path, cols, delimiter=",", header="log_r,log_v,log_grad_v", comments="",
               fmt="%.17g")


def _summary_rows(rc: RunConfig) -> list[dict]:
    rows = []
    cert = rc.out / "reports" / "certification.json"
    if cert.exists():
        for c in read_json(cert)["checks"]:
            rows.append({"check": c["check"], "anchor": c["anchor"], "passed": c["passed"],
                         "value": c["worst_margin"]})
    ana = rc.out / "reports" / "analysis.json"
    if ana.exists():
        doc = read_json(ana)
        for name, e in doc["runs"].items():
            for key, val in (("sandwich", "violation"), ("growth", "slope"),
                             ("gradient_blowup", "slope"), ("tracking", "passed"),
                             ("continuity", "passed")):
                if key in e:
                    rows.append({"check": f"{name}.{key}", "anchor": e[key]["anchor"],
                                 "passed": e[key]["passed"], "value": e[key][val]})
        if "chain" in doc:
            ch = doc["chain"]
            rows.append({"check": "chain", "anchor": ch["anchor"], "passed": ch["passed"],
                         "value": max(ch["violations"].values())})
    return rows


def cmd_report(rc: RunConfig, args) -> int:
    rows = _summary_rows(rc)
    if not rows:
        raise ConfigError(f"no reports under {rc.out / 'reports'}; run tune/analyze first")
    params = read_json(rc.out / "params.json") if (rc.out / "params.json").exists() else None
    write_json(rc.out / "reports" / "summary.json", {"params": params, "checks": rows})
    lines = ["# Run summary", "", "| check | anchor | result | value |", "|---|---|---|---|"]
    for r in rows:
        val = r["value"]
        sval = f"{val:.4g}" if isinstance(val, float) else str(val)
        anchor = r["anchor"].replace("|", "\\|")
        lines.append(f"| {r['check']} | {anchor} | {'pass' if r['passed'] else 'FAIL'} "
                     f"| {sval} |")
    (rc.out / "reports" / "summary.md").write_text("\n".join(lines) + "\n")
    n_fail = sum(not r["passed"] for r in rows)
    _say(f"{len(rows)} checks, {n_fail} failed")
    return EXIT_OK if n_fail == 0 else EXIT_FAIL


def cmd_run(rc: RunConfig, args) -> int:
    worst = EXIT_OK
    for cmd in (cmd_tune, cmd_simulate, cmd_analyze, cmd_report):
        code = cmd(rc, args)
        if code != EXIT_OK and cmd in (cmd_tune, cmd_simulate):
            return code
        worst = max(worst, code)
    return worst


COMMANDS = {
    "validate": (cmd_validate, "check the exponents and curve, print derived constants"),
    "tune": (cmd_tune, "search the barrier constants and certify them"),
    "certify": (cmd_certify, "re-certify a params file"),
    "simulate": (cmd_simulate, "solve the approximating problems and store snapshots"),
    "analyze": (cmd_analyze, "sandwich, exponent fits, gradient blow-up, chain"),
    "report": (cmd_report, "collect every check into one summary"),
    "run": (cmd_run, "tune, simulate, analyze and report in one go"),
}


def build_parser() -> argparse.ArgumentParser:
    ap = argparse.ArgumentParser(prog="plapsing", description=__doc__.split("\n")[0])
    sub = ap.add_subparsers(dest="command", required=True)
    for name, (_, help_) in COMMANDS.items():
        p = sub.add_parser(name, help=help_)
        p.add_argument("config", help="TOML run configuration")
        p.add_argument("--set", dest="overrides", action="append", default=[],
                       metavar="SECTION.KEY=VALUE", help="override a config field")
        p.add_argument("--out", help="output directory (overrides output.dir)")
        p.add_argument("--params", help="params file (default: <out>/params.json)")
    return ap


def main(argv=None) -> int:
    args = build_parser().parse_args(argv)
    func = COMMANDS[args.command][0]
    try:
        rc = load_config(args.config, args.overrides, args.out)
        code = func(rc, args)
    except (ConfigError, ExponentViolation, ConstraintViolation, sv.OrderingViolation) as exc:
        print(f"error: {exc}", file=sys.stderr)
        return EXIT_FAIL
    except (sv.StabilityError, sv.NonconvergenceError, sv.NegativeField, an.DegenerateWindow,
            FloatingPointError) as exc:
        print(f"numerical failure: {type(exc).__name__}: {exc}", file=sys.stderr)
        return EXIT_NUMERIC
    if rc.out.exists() and args.command != "validate":
        write_manifest(rc.out)
    return code


if __name__ == "__main__":
    sys.exit(main())
