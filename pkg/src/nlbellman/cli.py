"""Command line front end.

    nlbellman COMMAND (--preset NAME | --config FILE) [--set key=value ...]

Every command writes ``<command>.csv`` and ``<command>_summary.json`` into the
output directory (``--output-dir``, else $NLBELLMAN_OUTPUT_DIR, else the
config's ``output_dir``).  Files are written to a temporary name and renamed.
Exit codes: 0 success, 1 a check failed, 2 a solver did not converge,
3 bad configuration or violated precondition.
"""
from __future__ import annotations

import argparse
import csv
import io
import os
import sys
import tempfile
import time

import numpy as np
from scipy.interpolate import griddata

from . import __version__
from .barriers import certify_barriers
from .config import (PRESETS, ConfigError, apply_overrides, build, csv_comment, dump_config, load_config, preset,
                     summary_text)
from .geometry import check_assumption_H, classify_boundary
from .hamiltonian import exterior_from_config
from .montecarlo import FeedbackPolicy, simulate_payoff
from .solver import (BoundViolation, ConvergenceError, SchemeError, assemble, perron_sweep, policy_iteration,
                     value_iteration)
from .verify import PreconditionError, boundary_report, comparison_experiment, slack, viscosity_residuals

__all__ = ["main", "run", "COMMANDS", "EXIT_OK", "EXIT_CHECK", "EXIT_NONCONV", "EXIT_CONFIG"]

EXIT_OK, EXIT_CHECK, EXIT_NONCONV, EXIT_CONFIG = 0, 1, 2, 3
OUTPUT_ENV = "NLBELLMAN_OUTPUT_DIR"


class _Failure(Exception):
    def __init__(self, code, msg):
        super().__init__(msg)
        self.code = code


def _atomic_write(path: str, text: str):
    d = os.path.dirname(path) or "."
    os.makedirs(d, exist_ok=True)
    fd, tmp = tempfile.mkstemp(dir=d, prefix=".tmp-", suffix=os.path.basename(path))
    try:
        with os.fdopen(fd, "w", newline="") as fh:
            fh.write(text)
        os.replace(tmp, path)
    except BaseException:
        if os.path.exists(tmp):
            os.unlink(tmp)
        raise


def _csv_text(cfg, command, header, rows) -> str:
    buf = io.StringIO()
    buf.write(csv_comment(cfg, command) + "\n")
    w = csv.writer(buf, lineterminator="\n")
    w.writerow(header)
    for row in rows:
        w.writerow([f"{v:.12g}" if isinstance(v, float) else v for v in row])
    return buf.getvalue()


def _coords(dim):
    return ["x"] if dim == 1 else ["x", "y"]


def _solve(setup, cfg, refine: int = 0, method=None):
    grid = setup.grid(refine)
    scheme = assemble(setup.domain, setup.kernel, setup.problem, grid, setup.quad)
    s = cfg["solver"]
    method = method or s["method"]
    try:
        if method == "policy":
            res = policy_iteration(scheme, s["tol"], s["max_outer"])
        else:
            res = value_iteration(scheme, s["tol"])
    except ConvergenceError as exc:
        raise _Failure(EXIT_NONCONV, str(exc)) from None
    except BoundViolation as exc:
        raise _Failure(EXIT_CHECK, str(exc)) from None
    except SchemeError as exc:
        raise _Failure(EXIT_NONCONV, str(exc)) from None
    return scheme, res


def _tol_disc(setup, cfg, fine) -> float:
    """Sup difference between the solve on h and on 2h at nodes at least min_depth_h*2h deep."""
    _, coarse = _solve(setup, cfg, refine=-1)
    g = fine.values.grid
    deep = g.distance >= cfg["verify"]["min_depth_h"] * 2 * g.h
    return float(np.max(np.abs(coarse.values.inside(g.nodes[deep]) - fine.u[deep])))


def cmd_classify(cfg, setup):
    cls = classify_boundary(setup.domain, setup.problem, n_samples=cfg["verify"]["n_samples"])
    ok, info = check_assumption_H(cls)
    counts = {lab: int(np.sum(np.asarray(cls.labels) == lab)) for lab in ("In", "Out", "Mixed")}
    summary = {"counts": counts, "assumption_H": ok, "components": info, "sampled": True}
    return cls.header(setup.domain.dim), list(cls.rows()), summary, EXIT_OK if ok else EXIT_CHECK


def cmd_verify_barriers(cfg, setup):
    b = cfg["barriers"]
    rep = certify_barriers(setup.domain, setup.kernel, setup.problem, b["sigma"], b["sweep"], setup.quad,
                           b["n_samples"])
    header = [*_coords(setup.domain.dim), "d", "residual_dsigma", "residual_zeta", "I_omega_zeta"]
    summary = rep.summary()
    if not rep.applicable:
        summary["note"] = "no Gamma_in samples; barriers not applicable"
        return header, [], summary, EXIT_OK
    stable = bool(rep.stability) and rep.stability["max_relative_change"] <= 0.05
    summary["stable_5pct"] = stable
    ok = rep.signs_ok and rep.certified and rep.slope_ok and stable
    return header, list(rep.rows()), summary, EXIT_OK if ok else EXIT_CHECK


def cmd_solve(cfg, setup):
    scheme, res = _solve(setup, cfg)
    g = res.values.grid
    rows = [[i, *[float(c) for c in g.nodes[i]], float(res.u[i]), res.labels[res.policy[i]], float(res.node_residual[i])]
            for i in range(len(g))]
    summary = res.summary()
    summary.update({"nodes": len(g), "h": g.h, "warnings": list(scheme.warnings)})
    return ["node", *_coords(g.dim), "value", "policy", "residual"], rows, summary, EXIT_OK


def cmd_residuals(cfg, setup):
    """Residuals at every node with d >= min_depth_h*h; the slack check covers d >= residual_depth.

    Nodes in the boundary layer are reported but not checked: there the
    solution carries a d^(1-alpha) profile that a 5- or 13-node quadratic fit
    does not resolve, so the fit residual does not measure consistency.
    """
    _, res = _solve(setup, cfg)
    v = cfg["verify"]
    idx, vals = viscosity_residuals(res.values, setup.domain, setup.kernel, setup.problem, v["min_depth_h"], setup.quad)
    g = res.values.grid
    sl = slack(g.h, setup.kernel.alpha, v["c_slack"])
    checked = g.distance[idx] >= v["residual_depth"]
    rows = [[int(i), *[float(c) for c in g.nodes[i]], float(g.distance[i]), float(r), bool(ck), bool(abs(r) <= sl)]
            for i, r, ck in zip(idx, vals, checked)]
    worst = float(np.max(np.abs(vals[checked]))) if np.any(checked) else 0.0
    summary = {"nodes_reported": len(idx), "nodes_checked": int(checked.sum()), "residual_depth": v["residual_depth"],
               "max_abs_residual_checked": worst,
               "max_abs_residual_all": float(np.max(np.abs(vals))) if len(vals) else 0.0,
               "slack": sl, "c_slack": v["c_slack"], "passed": worst <= sl}
    return ["node", *_coords(g.dim), "d", "residual", "checked", "within_slack"], rows, summary, \
        EXIT_OK if worst <= sl else EXIT_CHECK


def cmd_loss_report(cfg, setup):
    _, res = _solve(setup, cfg)
    v = cfg["verify"]
    cls = classify_boundary(setup.domain, setup.problem, n_samples=v["n_samples"])
    rep = boundary_report(res.values, setup.domain, cls, setup.problem, v["boundary_tol"], v["t_min_h"], v["levels"])
    summary = {"passed": rep.all_passed, "tol": rep.tol,
               "max_gap": {lab: rep.max_gap(lab) for lab in ("In", "Out", "Mixed") if lab in rep.labels}}
    header = ["sample", *_coords(setup.domain.dim), "label", "phi", "limit", "gap", "uncertainty", "passed"]
    return header, list(rep.rows()), summary, EXIT_OK if rep.all_passed else EXIT_CHECK


def cmd_compare(cfg, setup):
    scheme, _ = _solve(setup, cfg)
    c = cfg["compare"]
    phi1 = setup.problem.phi
    if c.get("phi2") is not None:
        try:
            phi2 = exterior_from_config(c["phi2"], setup.domain.dim)
        except (KeyError, TypeError, ValueError) as exc:
            raise _Failure(EXIT_CONFIG, f"invalid compare.phi2: {exc}") from None
    else:
        phi2 = phi1.scaled(1.0, float(c.get("shift", 1.0)))
    try:
        rep = comparison_experiment(scheme, phi1, phi2, cfg["solver"]["tol"])
    except PreconditionError as exc:
        raise _Failure(EXIT_CONFIG, str(exc)) from None
    g = scheme.grid
    rows = [[i, *[float(x) for x in g.nodes[i]], float(rep.u1[i]), float(rep.u2[i]), float(rep.u2[i] - rep.u1[i])]
            for i in range(len(g))]
    summary = {"violations": rep.violations, "boundary_violations": rep.boundary_violations,
               "min_difference": rep.min_difference, "passed": rep.passed}
    return ["node", *_coords(g.dim), "u1", "u2", "difference"], rows, summary, EXIT_OK if rep.passed else EXIT_CHECK


def _read_policy_csv(path, setup):
    try:
        with open(path) as fh:
            lines = [ln for ln in fh if not ln.startswith("#")]
        reader = csv.DictReader(lines)
        coords = _coords(setup.domain.dim)
        nodes, labels, values = [], [], []
        for row in reader:
            nodes.append([float(row[c]) for c in coords])
            labels.append(row["policy"])
            values.append(float(row["value"]))
    except (OSError, KeyError, ValueError) as exc:
        raise _Failure(EXIT_CONFIG, f"cannot read policy CSV {path!r}: {exc}") from None
    try:
        pol = FeedbackPolicy.from_labels(nodes, labels, setup.problem)
    except ValueError as exc:
        raise _Failure(EXIT_CONFIG, str(exc)) from None
    return pol, np.asarray(nodes), np.asarray(values)


def cmd_mc_validate(cfg, setup, policy_csv=None):
    m = cfg["mc"]
    probes = m.get("probes") or []
    if not probes:
        raise _Failure(EXIT_CONFIG, "mc.probes is empty")
    if policy_csv:
        pol, nodes, vals = _read_policy_csv(policy_csv, setup)
        def pde(x):
            p = np.atleast_2d(np.asarray(x, dtype=float))
            if setup.domain.dim == 1:
                return float(np.interp(p[0, 0], nodes[:, 0], vals))
            return float(griddata(nodes, vals, p, method="linear")[0])
        tol_disc = m.get("tol_disc")
        if tol_disc is None:
            raise _Failure(EXIT_CONFIG, "mc.tol_disc is required with --policy")
    else:
        _, res = _solve(setup, cfg)
        pol = FeedbackPolicy.from_result(res)
        def pde(x):
            return float(res.values.inside(np.atleast_2d(np.asarray(x, dtype=float)))[0])
        tol_disc = m.get("tol_disc")
        if tol_disc is None:
            tol_disc = _tol_disc(setup, cfg, res)
    rows = []
    ok = True
    for x0 in probes:
        try:
            est = simulate_payoff(setup.domain, setup.kernel, setup.problem, pol, x0, setup.mc)
        except ValueError as exc:
            raise _Failure(EXIT_CONFIG, str(exc)) from None
        u = pde(x0)
        bound = 3 * est.stderr + tol_disc
        passed = abs(est.mean - u) <= bound
        ok &= passed
        rows.append([*[float(c) for c in np.atleast_1d(x0)], est.mean, est.stderr, est.mean_exit_time,
                     est.fraction_capped, u, bound, bool(passed)])
    summary = {"paths": setup.mc.paths, "jump_cutoff": setup.mc.jump_cutoff, "dt": setup.mc.dt,
               "tol_disc": tol_disc, "passed": bool(ok)}
    header = [*_coords(setup.domain.dim), "mean", "stderr", "mean_exit", "capped_fraction", "pde_value",
              "bound", "passed"]
    return header, rows, summary, EXIT_OK if ok else EXIT_CHECK


def cmd_perron_sweep(cfg, setup):
    scheme, direct = _solve(setup, cfg, method="policy")
    tol_disc = _tol_disc(setup, cfg, direct)
    try:
        rep = perron_sweep(scheme, direct, tol_disc, cfg["solver"]["eps_list"], cfg["verify"]["min_depth_h"],
                           cfg["solver"]["tol"])
    except ConvergenceError as exc:
        raise _Failure(EXIT_NONCONV, str(exc)) from None
    rows = []
    for j, eps in enumerate(rep.eps):
        diff = rep.differences[j - 1] if j > 0 else float("nan")
        rows.append([eps, bool(rep.bounds_ok[j]), diff, int(rep.iterations[j])])
    return ["eps", "within_g", "diff_to_previous", "iterations"], rows, rep.summary(), \
        EXIT_OK if rep.passed else EXIT_CHECK


COMMANDS = {
    "classify": cmd_classify,
    "verify-barriers": cmd_verify_barriers,
    "solve": cmd_solve,
    "residuals": cmd_residuals,
    "loss-report": cmd_loss_report,
    "compare": cmd_compare,
    "mc-validate": cmd_mc_validate,
    "perron-sweep": cmd_perron_sweep,
}


def output_dir(cfg, flag=None) -> str:
    return flag or os.environ.get(OUTPUT_ENV) or cfg["output_dir"]


def run(command: str, cfg: dict, out_dir=None, policy_csv=None, stream=None) -> int:
    """Run one command on a loaded config and write its artifacts; returns the exit code."""
    stream = stream or sys.stdout
    if command not in COMMANDS:
        print(f"unknown command {command!r}", file=sys.stderr)
        return EXIT_CONFIG
    t0 = time.perf_counter()
    try:
        setup = build(cfg)
        if command == "mc-validate":
            header, rows, summary, code = cmd_mc_validate(cfg, setup, policy_csv)
        else:
            header, rows, summary, code = COMMANDS[command](cfg, setup)
    except ConfigError as exc:
        print(f"config error: {exc}", file=sys.stderr)
        return EXIT_CONFIG
    except _Failure as exc:
        print(f"{command}: {exc}", file=sys.stderr)
        return exc.code
    out = output_dir(cfg, out_dir)
    stem = command.replace("-", "_")
    summary = dict(summary, command=command, config=cfg.get("name"), exit_code=code, version=__version__)
    _atomic_write(os.path.join(out, f"{stem}.csv"), _csv_text(cfg, command, header, rows))
    _atomic_write(os.path.join(out, f"{stem}_summary.json"), summary_text(summary))
    status = "ok" if code == EXIT_OK else "FAILED CHECK"
    print(f"{command} [{cfg.get('name')}]: {status} ({time.perf_counter() - t0:.1f} s) -> {out}", file=stream)
    return code


def _parser() -> argparse.ArgumentParser:
    p = argparse.ArgumentParser(prog="nlbellman", description="Nonlocal Bellman Dirichlet problems with boundary loss.")
    p.add_argument("--version", action="version", version=f"nlbellman {__version__}")
    p.add_argument("command", choices=sorted(COMMANDS))
    src = p.add_mutually_exclusive_group(required=True)
    src.add_argument("--preset", choices=sorted(PRESETS))
    src.add_argument("--config", help="YAML config file")
    p.add_argument("--set", dest="overrides", action="append", default=[], metavar="KEY=VALUE",
                   help="override a config key, e.g. --set kernel.alpha=0.3 (repeatable)")
    p.add_argument("--seed", type=int, help="same as --set seed=N")
    p.add_argument("--output-dir", help=f"output directory (overrides ${OUTPUT_ENV} and the config)")
    p.add_argument("--policy", help="solved policy CSV for mc-validate")
    p.add_argument("--dump-config", action="store_true", help="also write the resolved config as config.yaml")
    return p


def main(argv=None) -> int:
    args = _parser().parse_args(argv)
    try:
        cfg = preset(args.preset) if args.preset else load_config(args.config)
        overrides = list(args.overrides)
        if args.seed is not None:
            overrides.append(f"seed={args.seed}")
        if overrides:
            cfg = apply_overrides(cfg, overrides)
    except ConfigError as exc:
        print(f"config error: {exc}", file=sys.stderr)
        return EXIT_CONFIG
    if args.dump_config:
        _atomic_write(os.path.join(output_dir(cfg, args.output_dir), "config.yaml"), dump_config(cfg))
    return run(args.command, cfg, args.output_dir, args.policy)


if __name__ == "__main__":
    sys.exit(main())
