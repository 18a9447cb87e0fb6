"""Batch front-end: load a config, drive the solvers, emit artifacts.

Four subcommands over one problem config::

    jumpctrl simulate CONFIG --paths N [--steps K] [--seed S] --out DIR
    jumpctrl solve    CONFIG --method {penalized-grid,penalized-lsmc,dp}
                      [--ladder 1,2,4,8,16] [--steps K] [--nodes N]
                      [--paths N] [--seed S] --out DIR
    jumpctrl verify   CONFIG [--suite NAME] [--levels 1,2,4,8,16]
                      [--steps K] [--nodes N] [--paths N] [--field FIELD.csv]
                      [--seed S] [--out DIR]
    jumpctrl plot     INPUT.csv --kind {value-ladder,residual-heatmap,path-fan}
                      --out FILE.svg

Every run writes a manifest listing its outputs and per-check verdicts
(tri-state: pass / fail / skipped).  Exit codes: 0 everything passed,
1 an invariant check failed, 2 usage or validation error.  All numeric
outputs are a pure function of (config, seed, grid overrides); reruns
reproduce CSV artifacts byte for byte.  Tolerances come from the config's
``tolerances`` block, never from the commands.
"""

from __future__ import annotations

import argparse
import csv
import dataclasses
import json
import sys
import time
from dataclasses import dataclass, field
from pathlib import Path

import numpy as np

from . import __version__, bsde, dp, girsanov, hjb, problem, sim, svgplot
from . import transition

_fmt = sim._fmt

#: The five checks a ValueReport must always carry, even when skipped.
VERDICT_KEYS = ("monotonicity", "constraint-decay", "dpp",
                "value-equality", "hjb-certificate")
SUITES = ("martingale", "monotone", "constraint", "dpp",
          "value-equality", "hjb")
FIELD_SCHEMA = "jumpctrl-dpfield@1"


def _verdict(flag) -> str:
    if flag is None:
        return "skipped"
    return "pass" if flag else "fail"


def _jsonable(obj):
    """Recursively coerce report payloads into JSON-encodable values."""
    if dataclasses.is_dataclass(obj) and not isinstance(obj, type):
        return _jsonable(dataclasses.asdict(obj))
    if isinstance(obj, dict):
        return {str(k): _jsonable(v) for k, v in obj.items()}
    if isinstance(obj, (list, tuple)):
        return [_jsonable(v) for v in obj]
    if isinstance(obj, np.ndarray):
        return [_jsonable(v) for v in obj.tolist()]
    if isinstance(obj, np.generic):
        return obj.item()
    return obj


def _write_json(payload: dict, path: Path) -> None:
    with open(path, "w", encoding="utf-8") as fh:
        json.dump(_jsonable(payload), fh, indent=2, sort_keys=True)
        fh.write("\n")


@dataclass
class RunManifest:
    """Provenance record written next to every command's artifacts."""

    command: str
    config: str | None
    seed: int
    overrides: dict
    out_dir: str
    tool_version: str
    wall_clock_s: float
    verdicts: dict
    outputs: list

    def write(self, path: Path) -> None:
        _write_json(dataclasses.asdict(self), path)


@dataclass
class ValueReport:
    """Classical and randomized initial values side by side."""

    problem_id: str
    family: str
    fingerprint: str
    v0_dp: float | None
    levels: list
    level_values: list
    level_ses: list
    value_limit: float | None
    tilt: dict | None
    verdicts: dict = field(default_factory=dict)
    details: dict = field(default_factory=dict)

    def __post_init__(self):
        for key in VERDICT_KEYS:
            self.verdicts.setdefault(key, "skipped")

    def write(self, path: Path) -> None:
        _write_json(dataclasses.asdict(self), path)


def _problem_id(spec) -> str:
    return f"{spec.coefficients.family}:{spec.fingerprint()[:12]}"


# ---------------------------------------------------------------------------
# CSV artifacts
# ---------------------------------------------------------------------------

def _state_columns(spec) -> list:
    cols = [f"x{i}" for i in range(spec.dim)]
    if spec.aug_dim:
        cols.append("running")
    return cols


def _write_csv(path: Path, header: list, rows) -> None:
    with open(path, "w", newline="", encoding="utf-8") as fh:
        w = csv.writer(fh, lineterminator="\r\n")
        w.writerow(header)
        w.writerows(rows)


def write_ladder_csv(report, path: Path) -> None:
    rows = [(str(n), _fmt(v), _fmt(s))
            for n, v, s in zip(report.levels, report.values, report.ses)]
    _write_csv(path, ["level", "value", "se"], rows)


def write_dp_field_csv(fld, spec, csv_path: Path,
                       sidecar_path: Path) -> None:
    """Value/argmax lattice as CSV plus a JSON sidecar with the axes.

    Rows run time-major, nodes in C order, so the pair round-trips through
    ``load_dp_field`` without any searching.
    """
    cols = _state_columns(spec)
    nodes = fld.grid.nodes()
    n_nodes = nodes.shape[0]
    rows = []
    for k, t in enumerate(fld.time_grid):
        vals = fld.values[k].ravel()
        args = (fld.argmax[k].ravel() if k < fld.n_steps
                else np.full(n_nodes, -1))
        for j in range(n_nodes):
            rows.append((_fmt(t), *(_fmt(c) for c in nodes[j]),
                         _fmt(vals[j]), str(int(args[j]))))
    _write_csv(csv_path, ["t", *cols, "value", "argmax"], rows)
    meta = {
        "schema": FIELD_SCHEMA,
        "family": spec.coefficients.family,
        "fingerprint": fld.metadata["fingerprint"],
        "kernel": fld.metadata["kernel"],
        "axes": [ax.tolist() for ax in fld.grid.axes],
        "time_grid": fld.time_grid.tolist(),
    }
    _write_json(meta, sidecar_path)


def load_dp_field(csv_path) -> dp.DpField:
    """Rebuild a value lattice from its CSV + sidecar pair.

    Raises ValueError with a reason on any corruption: missing sidecar,
    malformed JSON, wrong row count, unparseable cells.
    """
    csv_path = Path(csv_path)
    sidecar = csv_path.with_suffix(".json")
    try:
        meta = json.loads(sidecar.read_text(encoding="utf-8"))
        if meta.get("schema") != FIELD_SCHEMA:
            raise ValueError(f"sidecar schema is not {FIELD_SCHEMA!r}")
        grid = transition.LatticeGrid(
            axes=tuple(np.asarray(ax, dtype=float) for ax in meta["axes"]))
        time_grid = np.asarray(meta["time_grid"], dtype=float)
        n_nodes = int(np.prod(grid.shape))
        n_rows = time_grid.size * n_nodes
        values = np.empty(n_rows)
        argmax = np.empty(n_rows, dtype=np.int64)
        with open(csv_path, "r", newline="", encoding="utf-8") as fh:
            reader = csv.DictReader(fh)
            count = 0
            for row in reader:
                if count >= n_rows:
                    break
                values[count] = float(row["value"])
                argmax[count] = int(row["argmax"])
                count += 1
        if count != n_rows:
            raise ValueError(f"expected {n_rows} rows, found {count}")
        values = values.reshape(time_grid.size, *grid.shape)
        argmax = argmax.reshape(time_grid.size, *grid.shape)[:-1]
        metadata = {"solver": "dp-from-csv",
                    "fingerprint": meta["fingerprint"],
                    "kernel": meta["kernel"],
                    "dt": float(time_grid[1] - time_grid[0])}
        return dp.DpField(time_grid=time_grid, grid=grid, values=values,
                          argmax=argmax, metadata=metadata)
    except (OSError, KeyError, TypeError, ValueError,
            json.JSONDecodeError) as exc:
        raise ValueError(f"unreadable field artifact {csv_path}: "
                         f"{exc}") from exc


def write_penalized_field_csv(fld, spec, path: Path) -> None:
    cols = _state_columns(spec)
    nodes = fld.grid.nodes()
    n_controls = spec.control.size
    rows = []
    for k, t in enumerate(fld.time_grid):
        flat = fld.values[k].reshape(-1, n_controls)
        for j in range(nodes.shape[0]):
            for a in range(n_controls):
                rows.append((_fmt(t), *(_fmt(c) for c in nodes[j]),
                             str(a), _fmt(flat[j, a])))
    _write_csv(path, ["t", *cols, "regime", "value"], rows)


def write_residual_csv(res, spec, path: Path) -> None:
    """Residual surface as heat-map rows; band nodes carry 'nan'."""
    cols = _state_columns(spec)
    nodes = res.grid.nodes()
    rows = []
    for k, t in enumerate(res.time_grid):
        r = res.residual[k].ravel()
        a = res.argmax[k].ravel()
        for j in range(nodes.shape[0]):
            rows.append((_fmt(t), *(_fmt(c) for c in nodes[j]),
                         _fmt(r[j]), str(int(a[j]))))
    _write_csv(path, ["t", *cols, "residual", "argmax"], rows)


def _ensure_out_dir(out: str) -> Path:
    path = Path(out)
    path.mkdir(parents=True, exist_ok=True)
    return path


# ---------------------------------------------------------------------------
# Verify suites
# ---------------------------------------------------------------------------

class _Workbench:
    """Lazily built artifacts shared by the verify suites.

    Everything is keyed off one (config, seed, overrides) triple so a
    suite run never mixes fields from different lattices or seeds.
    """

    def __init__(self, spec, levels, steps, nodes, paths, seed):
        self.spec = spec
        self.levels = tuple(levels)
        self.steps = (steps if steps is not None
                      else bsde.default_time_steps(spec, max(self.levels)))
        self.nodes = nodes
        self.paths = paths
        self.seed = seed
        self._cache = {}

    def state_grid(self):
        if "grid" not in self._cache:
            self._cache["grid"] = transition.default_state_grid(
                self.spec, self.nodes, self.seed)
        return self._cache["grid"]

    def ladder(self):
        if "ladder" not in self._cache:
            self._cache["ladder"] = bsde.minimal_value(
                self.spec, levels=self.levels, solver="grid",
                n_time_steps=self.steps, n_state_nodes=self.nodes,
                seed=self.seed)
        return self._cache["ladder"]

    def penalized(self, level: int):
        if level == max(self.levels):
            return self.ladder().last_field
        key = ("pen", level)
        if key not in self._cache:
            self._cache[key] = bsde.solve_penalized_grid(
                self.spec, level, n_time_steps=self.steps,
                grid=self.state_grid(), seed=self.seed)
        return self._cache[key]

    def dp_field(self):
        if "dp" not in self._cache:
            self._cache["dp"] = dp.solve_dp_grid(
                self.spec, n_time_steps=self.steps,
                n_state_nodes=self.nodes, seed=self.seed)
        return self._cache["dp"]

    def bundle(self):
        if "bundle" not in self._cache:
            self._cache["bundle"] = sim.simulate_bundle(
                self.spec, self.paths, self.seed, n_steps=self.steps)
        return self._cache["bundle"]

    def argmax_tilt(self):
        fld = self.penalized(max(self.levels))
        strength = float(max(2, max(self.levels)))
        return girsanov.IntensityControl.argmax_tilt(
            fld.time_grid, fld.grid.axes, fld.values, strength)


def _suite_martingale(wb: _Workbench):
    """Tilt weights must average to one on a reference bundle, and the
    reweighted and tilted-simulation gain routes must agree."""
    se_mult = wb.spec.tolerances["se_multiplier"]
    bundle = wb.bundle()
    nus = [girsanov.IntensityControl.const(c) for c in (0.5, 1.0, 2.0)]
    nus.append(wb.argmax_tilt())
    weights = []
    ok = True
    for nu in nus:
        est = girsanov.reweighted_expectation(bundle, nu,
                                              girsanov.unit_payoff)
        err = abs(est["mean"] - 1.0)
        band = se_mult * est["se"] + 1e-12
        good = bool(err <= band)
        weights.append({"nu_id": nu.nu_id, "kappa_mean": est["mean"],
                        "kappa_se": est["se"], "ok": good})
        ok = ok and good
    agree = girsanov.check_mode_agreement(
        wb.spec, girsanov.IntensityControl.const(2.0),
        n_paths=wb.paths, seed=wb.seed, se_multiplier=se_mult,
        n_steps=wb.steps)
    ok = ok and agree["ok"]
    return ok, {"weights": weights, "mode_agreement": agree}


def _suite_monotone(wb: _Workbench):
    rep = wb.ladder()
    detail = {"levels": list(rep.levels), "values": list(rep.values),
              "max_violation": rep.monotone_max_violation,
              "tol_monotone": wb.spec.tolerances["tol_monotone"]}
    return rep.monotone_ok, detail


def _suite_constraint(wb: _Workbench):
    """Penalty pressure must relax as the level grows."""
    lo_n, hi_n = min(wb.levels), max(wb.levels)
    if lo_n == hi_n:
        raise problem.ConfigError("constraint suite needs >= 2 levels")
    lo = bsde.constraint_gap(wb.penalized(lo_n), wb.spec,
                             n_paths=wb.paths, seed=wb.seed)
    hi = bsde.constraint_gap(wb.penalized(hi_n), wb.spec,
                             n_paths=wb.paths, seed=wb.seed)
    # phi is a squared mean, so its MC noise comes from the mean's se
    noise = (2.0 * abs(lo.mean_integral) * lo.se_integral
             + 2.0 * abs(hi.mean_integral) * hi.se_integral
             + lo.se_integral ** 2 + hi.se_integral ** 2)
    phi_ok = bool(hi.phi <= lo.phi + noise + 1e-12)
    k_ok = bool(hi.k_ratio <= 0.5 * lo.k_ratio + 1e-12)
    detail = {"level_lo": lo_n, "level_hi": hi_n,
              "phi_lo": lo.phi, "phi_hi": hi.phi, "phi_ok": phi_ok,
              "k_lo": lo.k_ratio, "k_hi": hi.k_ratio, "k_ok": k_ok}
    return phi_ok and k_ok, detail


def _suite_dpp(wb: _Workbench):
    fld = wb.penalized(max(wb.levels))
    res = bsde.check_randomized_dpp(fld, wb.spec,
                                    t_prime=wb.spec.horizon / 2.0,
                                    n_paths=wb.paths, seed=wb.seed)
    return res["ok"], res


def _suite_value_equality(wb: _Workbench):
    nu = wb.argmax_tilt()
    est = girsanov.randomized_gain(wb.spec, nu, n_paths=wb.paths,
                                   seed=wb.seed, mode="tilted",
                                   n_steps=wb.steps)
    res = dp.value_equality_check(wb.dp_field(), wb.ladder(), wb.spec,
                                  tilt_estimate=est)
    res["tilt_nu"] = nu.nu_id
    res["tilt_se"] = est.se
    return res["ok"], res


def _suite_hjb(wb: _Workbench, field_path=None):
    if field_path is not None:
        try:
            fld = load_dp_field(field_path)
        except ValueError as exc:
            return None, {"reason": str(exc)}
    else:
        fld = wb.dp_field()
    cert = hjb.residual_certificate(fld, wb.spec)
    detail = {k: v for k, v in cert.items() if k != "residual_field"}
    return cert["ok"], detail


_SUITE_FNS = {
    "martingale": _suite_martingale,
    "monotone": _suite_monotone,
    "constraint": _suite_constraint,
    "dpp": _suite_dpp,
    "value-equality": _suite_value_equality,
}


# ---------------------------------------------------------------------------
# Commands
# ---------------------------------------------------------------------------

def cmd_simulate(args) -> int:
    t0 = time.perf_counter()
    spec = problem.load_problem(args.config)
    bundle = sim.simulate_bundle(spec, args.paths, args.seed,
                                 n_steps=args.steps)
    out = _ensure_out_dir(args.out)
    sim.write_bundle_csv(bundle, str(out / "paths.csv"),
                         str(out / "paths.json"))
    manifest = RunManifest(
        command="simulate", config=args.config, seed=args.seed,
        overrides={"paths": args.paths, "steps": args.steps},
        out_dir=str(out), tool_version=__version__,
        wall_clock_s=round(time.perf_counter() - t0, 3),
        verdicts={}, outputs=["paths.csv", "paths.json", "manifest.json"])
    manifest.write(out / "manifest.json")
    print(f"wrote {bundle.n_paths} paths x {bundle.n_steps} steps "
          f"({bundle.n_excluded} excluded) to {out}")
    return 0


def cmd_solve(args) -> int:
    t0 = time.perf_counter()
    spec = problem.load_problem(args.config)
    out = _ensure_out_dir(args.out)
    outputs = ["value_report.json", "manifest.json"]
    verdicts: dict = {}
    details: dict = {}
    skipped_note = {"reason": "not computed by solve; run jumpctrl verify"}

    if args.method == "dp":
        fld = dp.solve_dp_grid(spec, n_time_steps=args.steps,
                               n_state_nodes=args.nodes, seed=args.seed)
        write_dp_field_csv(fld, spec, out / "dp_field.csv",
                           out / "dp_field.json")
        outputs += ["dp_field.csv", "dp_field.json"]
        cert = hjb.residual_certificate(fld, spec)
        verdicts["hjb-certificate"] = _verdict(cert["ok"])
        details["hjb-certificate"] = {
            k: v for k, v in cert.items() if k != "residual_field"}
        write_residual_csv(cert["residual_field"], spec,
                           out / "residual.csv")
        outputs.append("residual.csv")
        report = ValueReport(
            problem_id=_problem_id(spec),
            family=spec.coefficients.family,
            fingerprint=spec.fingerprint(),
            v0_dp=fld.value_at_origin(spec),
            levels=[], level_values=[], level_ses=[],
            value_limit=None, tilt=None,
            verdicts=verdicts, details=details)
    else:
        solver = "grid" if args.method == "penalized-grid" else "lsmc"
        ladder = bsde.minimal_value(
            spec, levels=args.ladder, solver=solver,
            n_time_steps=args.steps, n_state_nodes=args.nodes,
            seed=args.seed, n_paths=args.paths)
        write_ladder_csv(ladder, out / "ladder.csv")
        outputs.append("ladder.csv")
        verdicts["monotonicity"] = _verdict(ladder.monotone_ok)
        details["monotonicity"] = {
            "max_violation": ladder.monotone_max_violation,
            "tol_monotone": spec.tolerances["tol_monotone"]}

        # classical value on the same time grid keeps the report
        # apples-to-apples
        fld = dp.solve_dp_grid(spec, n_time_steps=ladder.n_time_steps,
                               n_state_nodes=args.nodes, seed=args.seed)
        write_dp_field_csv(fld, spec, out / "dp_field.csv",
                           out / "dp_field.json")
        outputs += ["dp_field.csv", "dp_field.json"]

        tilt = None
        if solver == "grid":
            pen = ladder.last_field
            write_penalized_field_csv(pen, spec, out / "penalized_field.csv")
            outputs.append("penalized_field.csv")
            nu = girsanov.IntensityControl.argmax_tilt(
                pen.time_grid, pen.grid.axes, pen.values,
                strength=float(max(2, max(args.ladder))))
            est = girsanov.randomized_gain(
                spec, nu, n_paths=args.paths, seed=args.seed,
                mode="tilted", n_steps=ladder.n_time_steps)
            tilt = {"nu_id": nu.nu_id, "mean": est.mean, "se": est.se}
            eq = dp.value_equality_check(fld, ladder, spec,
                                         tilt_estimate=est)
            cert = hjb.residual_certificate(pen, spec)
        else:
            eq = dp.value_equality_check(fld, ladder, spec)
            cert = hjb.residual_certificate(fld, spec)
        verdicts["value-equality"] = _verdict(eq["ok"])
        details["value-equality"] = eq
        verdicts["hjb-certificate"] = _verdict(cert["ok"])
        details["hjb-certificate"] = {
            k: v for k, v in cert.items() if k != "residual_field"}
        write_residual_csv(cert["residual_field"], spec,
                           out / "residual.csv")
        outputs.append("residual.csv")
        details["constraint-decay"] = skipped_note
        details["dpp"] = skipped_note
        report = ValueReport(
            problem_id=_problem_id(spec),
            family=spec.coefficients.family,
            fingerprint=spec.fingerprint(),
            v0_dp=fld.value_at_origin(spec),
            levels=list(ladder.levels),
            level_values=list(ladder.values),
            level_ses=list(ladder.ses),
            value_limit=ladder.value_limit, tilt=tilt,
            verdicts=verdicts, details=details)

    report.write(out / "value_report.json")
    manifest = RunManifest(
        command="solve", config=args.config, seed=args.seed,
        overrides={"method": args.method, "ladder": list(args.ladder),
                   "steps": args.steps, "nodes": args.nodes,
                   "paths": args.paths},
        out_dir=str(out), tool_version=__version__,
        wall_clock_s=round(time.perf_counter() - t0, 3),
        verdicts=report.verdicts, outputs=sorted(outputs))
    manifest.write(out / "manifest.json")

    v0 = "-" if report.v0_dp is None else _fmt(report.v0_dp)
    lim = "-" if report.value_limit is None else _fmt(report.value_limit)
    print(f"{report.problem_id} [{args.method}] v0_dp={v0} "
          f"randomized_limit={lim}")
    for key in VERDICT_KEYS:
        print(f"  {key:<18} {report.verdicts[key]}")
    return 1 if "fail" in report.verdicts.values() else 0


def cmd_verify(args) -> int:
    t0 = time.perf_counter()
    spec = problem.load_problem(args.config)
    wb = _Workbench(spec, levels=args.levels, steps=args.steps,
                    nodes=args.nodes, paths=args.paths, seed=args.seed)
    chosen = SUITES if args.suite == "all" else (args.suite,)
    verdicts: dict = {}
    details: dict = {}
    for name in chosen:
        if name == "hjb":
            ok, detail = _suite_hjb(wb, args.field)
        else:
            ok, detail = _SUITE_FNS[name](wb)
        verdicts[name] = _verdict(ok)
        details[name] = detail
        note = ""
        if verdicts[name] == "skipped" and "reason" in detail:
            note = f"  ({detail['reason']})"
        print(f"{name:<16} {verdicts[name]}{note}")

    out = _ensure_out_dir(args.out)
    _write_json({
        "problem_id": _problem_id(spec),
        "family": spec.coefficients.family,
        "fingerprint": spec.fingerprint(),
        "seed": args.seed, "n_paths": args.paths,
        "tolerances": spec.tolerances,
        "verdicts": verdicts, "details": details,
    }, out / "verify_report.json")
    manifest = RunManifest(
        command="verify", config=args.config, seed=args.seed,
        overrides={"suite": args.suite, "levels": list(args.levels),
                   "steps": args.steps, "nodes": args.nodes,
                   "paths": args.paths, "field": args.field},
        out_dir=str(out), tool_version=__version__,
        wall_clock_s=round(time.perf_counter() - t0, 3),
        verdicts=verdicts,
        outputs=["verify_report.json", "manifest.json"])
    manifest.write(out / "manifest.json")
    return 1 if "fail" in verdicts.values() else 0


_PLOT_COLUMNS = {
    "value-ladder": ("level", "value"),
    "residual-heatmap": ("t", "x0", "residual"),
    "path-fan": ("path", "t", "x0"),
}
_PLOT_FNS = {
    "value-ladder": svgplot.render_value_ladder,
    "residual-heatmap": svgplot.render_residual_heatmap,
    "path-fan": svgplot.render_path_fan,
}


def cmd_plot(args) -> int:
    t0 = time.perf_counter()
    with open(args.input, "r", newline="", encoding="utf-8") as fh:
        rows = list(csv.DictReader(fh))
    if not rows:
        raise problem.ConfigError(f"empty CSV: {args.input} has no data rows")
    missing = [c for c in _PLOT_COLUMNS[args.kind] if c not in rows[0]]
    if missing:
        raise problem.ConfigError(
            f"{args.input} lacks required columns {missing} "
            f"for kind {args.kind!r}")
    svg = _PLOT_FNS[args.kind](rows)
    out = Path(args.out)
    if out.parent != Path(""):
        out.parent.mkdir(parents=True, exist_ok=True)
    out.write_text(svg, encoding="utf-8")
    manifest = RunManifest(
        command="plot", config=None, seed=0,
        overrides={"input": args.input, "kind": args.kind},
        out_dir=str(out.parent), tool_version=__version__,
        wall_clock_s=round(time.perf_counter() - t0, 3),
        verdicts={},
        outputs=[out.name, out.name + ".manifest.json"])
    manifest.write(out.with_name(out.name + ".manifest.json"))
    print(f"wrote {out}")
    return 0


# ---------------------------------------------------------------------------
# Parser
# ---------------------------------------------------------------------------

def _level_list(text: str) -> tuple:
    try:
        vals = tuple(int(p) for p in text.split(",") if p.strip())
    except ValueError:
        raise argparse.ArgumentTypeError(
            f"expected comma-separated integers, got {text!r}")
    if not vals:
        raise argparse.ArgumentTypeError("expected at least one level")
    return vals


def _add_common(sub, with_nodes: bool = True) -> None:
    sub.add_argument("--steps", type=int, default=None,
                     help="time steps (default: from the config)")
    if with_nodes:
        sub.add_argument("--nodes", type=int, default=None,
                         help="state nodes per axis (default: from the "
                              "config)")
    sub.add_argument("--seed", type=int, default=0)


def build_parser() -> argparse.ArgumentParser:
    parser = argparse.ArgumentParser(
        prog="jumpctrl",
        description="Solvers and invariant checks for controlled "
                    "jump-diffusions with randomized regimes.")
    parser.add_argument("--version", action="version",
                        version=f"%(prog)s {__version__}")
    sub = parser.add_subparsers(dest="command", required=True)

    p_sim = sub.add_parser("simulate",
                           help="simulate reference paths to CSV")
    p_sim.add_argument("config")
    p_sim.add_argument("--paths", type=int, default=1000)
    _add_common(p_sim, with_nodes=False)
    p_sim.add_argument("--out", required=True)
    p_sim.set_defaults(func=cmd_simulate)

    p_solve = sub.add_parser("solve",
                             help="solve for the value and write a report")
    p_solve.add_argument("config")
    p_solve.add_argument("--method", required=True,
                         choices=("penalized-grid", "penalized-lsmc", "dp"))
    p_solve.add_argument("--ladder", type=_level_list,
                         default=(1, 2, 4, 8, 16),
                         help="penalization levels, e.g. 1,2,4,8")
    p_solve.add_argument("--paths", type=int, default=20_000,
                         help="Monte Carlo paths (regression/tilt bound)")
    _add_common(p_solve)
    p_solve.add_argument("--out", required=True)
    p_solve.set_defaults(func=cmd_solve)

    p_ver = sub.add_parser("verify", help="run the invariant suites")
    p_ver.add_argument("config")
    p_ver.add_argument("--suite", choices=("all",) + SUITES, default="all")
    p_ver.add_argument("--levels", type=_level_list,
                       default=(1, 2, 4, 8, 16))
    p_ver.add_argument("--paths", type=int, default=20_000)
    _add_common(p_ver)
    p_ver.add_argument("--field", default=None,
                       help="certify this solved field CSV instead of "
                            "resolving one (hjb suite)")
    p_ver.add_argument("--out", default=".")
    p_ver.set_defaults(func=cmd_verify)

    p_plot = sub.add_parser("plot", help="render a CSV artifact to SVG 1.1")
    p_plot.add_argument("input")
    p_plot.add_argument("--kind", required=True,
                        choices=("value-ladder", "residual-heatmap",
                                 "path-fan"))
    p_plot.add_argument("--out", required=True)
    p_plot.set_defaults(func=cmd_plot)
    return parser


def main(argv=None) -> int:
    parser = build_parser()
    try:
        args = parser.parse_args(argv)
    except SystemExit as exc:
        # argparse already printed the usage message
        return int(exc.code or 0)
    try:
        return args.func(args)
    except (ValueError, OSError) as exc:
        print(f"error: {exc}", file=sys.stderr)
        return 2


if __name__ == "__main__":
    sys.exit(main())
