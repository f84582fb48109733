"""Command-line entry point.

Every leaf command resolves its options as defaults < ``--config`` JSON <
explicit flags, echoes the result to ``<prefix>_config.json`` and stamps
each output with the SHA-256 of that resolved configuration. Exit codes:
0 success, 1 usage or domain error, 2 numerical failure.
"""

from __future__ import annotations

import argparse
import json
import math
import os
import sys
from dataclasses import dataclass
from pathlib import Path
from typing import Any, Callable, Optional

import numpy as np

from kp2lab import crit_lengths, hum_control, observability, pde_core, spectral, stabilization
from kp2lab.errors import ConfigurationError, DomainError, Kp2Error, NonConvergence, NumericalError
from kp2lab.outputs import config_hash, json_text, write_csv, write_json, write_bytes_atomic


class UsageError(Exception):
    pass


class _Parser(argparse.ArgumentParser):
    def error(self, message):
        raise UsageError(message)


@dataclass(frozen=True)
class Opt:
    flag: str
    dest: str
    type: Callable = float
    default: Any = None
    required: bool = False
    choices: Optional[tuple] = None
    help: str = ""


def _grid_spec(text: str) -> tuple[int, int]:
    try:
        nx, ny = (int(v) for v in str(text).lower().split("x"))
    except ValueError:
        raise ValueError(f"grid must look like 48x24, got {text!r}")
    return nx, ny


def _flag_bool(value) -> bool:
    if isinstance(value, bool):
        return value
    raise ValueError(f"expected true or false, got {value!r}")


OUT = Opt("--out", "out", str, required=True, help="output path or prefix")
COMMANDS: dict[str, list[Opt]] = {
    "crit enumerate": [
        Opt("--lmin", "lmin", required=True), Opt("--lmax", "lmax", required=True),
        Opt("--mcap", "mcap", int, 8), OUT],
    "crit check": [
        Opt("--length", "length", required=True), Opt("--tol", "tol", float, 1e-9),
        Opt("--mcap", "mcap", int, 8),
        Opt("--out", "out", str, None, help="optional prefix for a verdict file")],
    "spectral report": [
        Opt("--n", "n", int, required=True), Opt("--m1", "m1", int, required=True),
        Opt("--m2", "m2", int, required=True), Opt("--m3", "m3", int, required=True), OUT],
    "spectral scan": [
        Opt("--xi", "xi", float, 0.0), Opt("--lmin", "lmin", required=True),
        Opt("--lmax", "lmax", required=True), Opt("--steps", "steps", int, 50),
        Opt("--grid", "grid", int, 256), OUT],
    "simulate": [
        Opt("--L", "L", required=True), Opt("--nx", "nx", int, 64), Opt("--ny", "ny", int, 32),
        Opt("--T", "T", float, 1.0), Opt("--dt", "dt", float, 1e-3),
        Opt("--mode", "mode", str, "hom", choices=("hom", "feedback", "control")),
        Opt("--alpha", "alpha", float, 0.5),
        Opt("--u0", "u0", str, "sine", help="preset name or .field path"),
        Opt("--h", "h", str, "zero", choices=("zero", "sine"), help="control preset"),
        Opt("--no-drift", "drift", _flag_bool, True), OUT],
    "observability scan": [
        Opt("--mode", "mode", str, "ctrl", choices=observability.MODES),
        Opt("--lmin", "lmin", required=True), Opt("--lmax", "lmax", required=True),
        Opt("--steps", "steps", int, 3), Opt("--T", "T", float, 2.0),
        Opt("--dt", "dt", float, 0.01), Opt("--dx-target", "dx_target", float, 0.25),
        Opt("--alpha", "alpha", float, 0.5), Opt("--tol", "tol", float, 1e-6),
        Opt("--maxit", "maxit", int, 2000), OUT],
    "control synth": [
        Opt("--L", "L", required=True), Opt("--T", "T", float, 1.0),
        Opt("--grid", "grid", str, "48x24"), Opt("--dt", "dt", float, 1e-3),
        Opt("--u0", "u0", str, "zero"), Opt("--uT", "uT", str, "sine-unit"),
        Opt("--tol", "tol", float, 1e-6), Opt("--maxit", "maxit", int, 500),
        Opt("--stall", "stall", int, 50), OUT],
    "stabilize": [
        Opt("--L", "L", required=True), Opt("--alpha", "alpha", float, 0.5),
        Opt("--T", "T", float, 4.0), Opt("--grid", "grid", str, "64x32"),
        Opt("--dt", "dt", float, 1e-3), Opt("--safety", "safety", float, 0.9),
        Opt("--u0", "u0", str, "sine"), Opt("--fit-t0", "fit_t0", float, 0.0), OUT],
    "lyapunov": [
        Opt("--L", "L", required=True), Opt("--alpha", "alpha", float, 0.5),
        Opt("--safety", "safety", float, 0.9),
        Opt("--out", "out", str, None, help="optional prefix for a certificate file")],
}

FIELD_PRESETS = ("zero", "sine", "sine-unit", "sine2", "bump")


def build_parser() -> _Parser:
    parser = _Parser(prog="kp2", description="Linear KP-II boundary-control workbench.")
    groups = parser.add_subparsers(dest="group", required=True, parser_class=_Parser)
    leaves: dict[str, _Parser] = {}
    nested: dict[str, Any] = {}
    for name in COMMANDS:
        head, _, tail = name.partition(" ")
        if tail:
            if head not in nested:
                sub = groups.add_parser(head)
                nested[head] = sub.add_subparsers(dest="action", required=True,
                                                  parser_class=_Parser)
            leaves[name] = nested[head].add_parser(tail)
        else:
            leaves[name] = groups.add_parser(head)
    for name, leaf in leaves.items():
        leaf.add_argument("--config", default=None, help="JSON file of option values")
        leaf.add_argument("--seed", type=int, default=argparse.SUPPRESS)
        leaf.add_argument("--threads", type=int, default=argparse.SUPPRESS)
        for opt in COMMANDS[name]:
            if opt.type is _flag_bool:
                leaf.add_argument(opt.flag, dest=opt.dest, action="store_const", const=False,
                                  default=argparse.SUPPRESS, help=opt.help)
            else:
                leaf.add_argument(opt.flag, dest=opt.dest, type=opt.type,
                                  default=argparse.SUPPRESS, choices=opt.choices, help=opt.help)
    return parser


def _convert(opt: Opt, value):
    try:
        if opt.type is int:
            if isinstance(value, (bool, float)):
                raise ValueError
            return int(value)
        if opt.type is float:
            if isinstance(value, bool):
                raise ValueError
            return float(value)
        if opt.type is _flag_bool:
            return _flag_bool(value)
        return str(value)
    except (TypeError, ValueError):
        name = getattr(opt.type, "__name__", "value").lstrip("_")
        raise UsageError(f"option '{opt.dest}': cannot use {value!r} as {name}")


def _env_int(name: str, default: int) -> int:
    raw = os.environ.get(name)
    if raw is None or raw == "":
        return default
    try:
        return int(raw)
    except ValueError:
        raise UsageError(f"environment variable {name} must be an integer, got {raw!r}")


@dataclass
class RunConfig:
    command: str
    options: dict
    threads: int

    @property
    def digest(self) -> str:
        # output location does not change results, so it stays out of the hash
        hashed = {k: v for k, v in self.options.items() if k != "out"}
        return config_hash({"command": self.command, "options": hashed})

    def echo(self) -> dict:
        return {"command": self.command, "options": self.options,
                "config_sha256": self.digest}


def parse_config(argv: list[str]) -> RunConfig:
    ns = vars(build_parser().parse_args(argv))
    command = ns.pop("group")
    action = ns.pop("action", None)
    if action:
        command = f"{command} {action}"
    specs = {o.dest: o for o in COMMANDS[command]}
    resolved = {d: o.default for d, o in specs.items()}
    resolved["seed"] = _env_int("KP2_SEED", 0)
    threads = _env_int("KP2_THREADS", 1)
    cfg_path = ns.pop("config", None)
    if cfg_path:
        try:
            data = json.loads(Path(cfg_path).read_text())
        except (OSError, json.JSONDecodeError) as exc:
            raise UsageError(f"cannot read config file {cfg_path}: {exc}")
        if not isinstance(data, dict):
            raise UsageError("config file must hold a JSON object")
        if "options" in data:
            if data.get("command", command) != command:
                raise UsageError(f"config file is for '{data['command']}', not '{command}'")
            data = data["options"]
        for key, value in data.items():
            if key == "seed":
                resolved["seed"] = _convert(Opt("--seed", "seed", int), value)
            elif key in specs:
                resolved[key] = _convert(specs[key], value)
            else:
                raise UsageError(f"unknown config key '{key}' for '{command}'")
    if "threads" in ns:
        threads = ns.pop("threads")
    resolved.update(ns)
    for dest, opt in specs.items():
        if opt.required and resolved.get(dest) is None:
            raise UsageError(f"missing required option {opt.flag} ('{dest}')")
        if opt.choices and resolved[dest] not in opt.choices:
            raise UsageError(f"option '{dest}' must be one of {opt.choices}")
    if threads < 1:
        raise UsageError("threads must be >= 1")
    return RunConfig(command, resolved, threads)


# ---------------------------------------------------------------------------
# helpers


def _prefix(out: str) -> str:
    p = Path(out)
    return str(p.with_suffix("")) if p.suffix in (".csv", ".json") else out


def _echo(rc: RunConfig, prefix: str) -> None:
    write_text = json.dumps(rc.echo(), indent=2, sort_keys=True) + "\n"
    write_bytes_atomic(f"{prefix}_config.json", write_text.encode())


def make_field(spec: str, grid: pde_core.Grid) -> pde_core.Field:
    if spec in FIELD_PRESETS:
        L = grid.L
        if spec == "zero":
            return pde_core.Field.zeros(grid)
        if spec in ("sine", "sine-unit"):
            f = pde_core.sine_mode(grid)
            return pde_core.Field(grid, f.values / f.norm()) if spec == "sine-unit" else f
        if spec == "sine2":
            return pde_core.Field.from_function(
                grid, lambda X, Y: np.sin(np.pi * X / L) ** 2 * np.sin(np.pi * Y / L))
        return pde_core.Field.from_function(
            grid, lambda X, Y: np.exp(-((X - L / 2) ** 2 + (Y - L / 2) ** 2) / (0.1 * L) ** 2))
    path = Path(spec)
    if not path.exists():
        raise ConfigurationError(f"'{spec}' is neither a preset {FIELD_PRESETS} nor a file")
    field, _ = pde_core.read_field(path)
    if field.grid != grid:
        raise ConfigurationError(
            f"field file grid {field.grid} does not match requested grid {grid}")
    return field


def _grid(opts: dict, key: str = "grid") -> tuple[int, int]:
    try:
        return _grid_spec(opts[key])
    except ValueError as exc:
        raise UsageError(str(exc))


def _trace_l2(trace: np.ndarray, dy: float) -> np.ndarray:
    return np.sqrt(dy * np.sum(trace * trace, axis=1))


def _energy_rows(traj: pde_core.Trajectory):
    dy = traj.grid.dy
    cols = (traj.times, traj.energy, _trace_l2(traj.ux0, dy), _trace_l2(traj.uxL, dy),
            _trace_l2(traj.nonlocal0, dy))
    return zip(*cols)


ENERGY_HEADER = ("t", "E", "ux0_l2", "uxL_l2", "nonlocal0_l2")


# ---------------------------------------------------------------------------
# commands


def cmd_crit_enumerate(rc: RunConfig) -> int:
    o = rc.options
    entries = crit_lengths.enumerate_R(o["lmin"], o["lmax"], o["mcap"])
    rows = [(e.value, e.params.n, e.params.m1, e.params.m2, e.params.m3, e.product)
            for e in entries]
    _echo(rc, _prefix(o["out"]))
    write_csv(o["out"], ("L", "n", "m1", "m2", "m3", "P"), rows, rc.digest)
    return 0


def cmd_crit_check(rc: RunConfig) -> int:
    o = rc.options
    verdict = crit_lengths.contains(o["length"], o["tol"], o["mcap"]).to_dict()
    text = json_text(verdict, rc.digest)
    if o["out"]:
        _echo(rc, o["out"])
        write_bytes_atomic(f"{o['out']}_verdict.json", text.encode())
    sys.stdout.write(text)
    return 0


def cmd_spectral_report(rc: RunConfig) -> int:
    o = rc.options
    params = crit_lengths.CriticalParams(o["n"], o["m1"], o["m2"], o["m3"])
    _echo(rc, _prefix(o["out"]))
    write_json(o["out"], spectral.spectrum_report(params), rc.digest)
    return 0


def cmd_spectral_scan(rc: RunConfig) -> int:
    o = rc.options
    rows = spectral.criticality_scan(o["xi"], o["lmin"], o["lmax"], o["steps"], o["grid"],
                                     workers=rc.threads)
    _echo(rc, _prefix(o["out"]))
    write_csv(o["out"], ("L", "indicator"), rows, rc.digest)
    return 0


_MODE_NAMES = {"hom": "homogeneous", "feedback": "feedback", "control": "control"}


def cmd_simulate(rc: RunConfig) -> int:
    o = rc.options
    grid = pde_core.Grid(o["L"], o["nx"], o["ny"])
    mode = _MODE_NAMES[o["mode"]]
    cfg = pde_core.SimConfig(o["T"], o["dt"], o["drift"], mode,
                             o["alpha"] if mode == "feedback" else 0.0)
    u0 = make_field(o["u0"], grid)
    h = None
    if mode == "control":
        times = np.linspace(0.0, cfg.T, cfg.steps + 1)
        shape = np.sin(np.pi * grid.y() / grid.L)[:, None]
        values = np.zeros((grid.Ny, times.size)) if o["h"] == "zero" else shape * np.sin(times)[None, :]
        h = pde_core.ControlSignal(values, times)
    traj = pde_core.simulate(u0, cfg, h)
    prefix = o["out"]
    report = {"grid": {"L": grid.L, "Nx": grid.Nx, "Ny": grid.Ny},
              "steps": cfg.steps, "dt": cfg.step_size, "mode": mode,
              "E0": float(traj.energy[0]), "ET": float(traj.energy[-1]),
              "estimates": None}
    if mode != "control":
        report["estimates"] = pde_core.estimate_report(traj, u0).to_dict()
        report["kato_constant"] = pde_core.kato_constant(cfg.T, grid.L, cfg.closure_alpha)
    _echo(rc, prefix)
    write_csv(f"{prefix}_energy.csv", ENERGY_HEADER, _energy_rows(traj), rc.digest)
    write_bytes_atomic(f"{prefix}_final.field", pde_core.encode_field(traj.final, cfg.T))
    write_json(f"{prefix}_report.json", report, rc.digest)
    return 0


def cmd_observability_scan(rc: RunConfig) -> int:
    o = rc.options
    if o["steps"] < 1:
        raise UsageError("steps must be >= 1")
    lengths = ([o["lmin"]] if o["steps"] == 1
               else [float(v) for v in np.linspace(o["lmin"], o["lmax"], o["steps"])])
    reports = observability.scan(lengths, o["T"], o["dt"], o["dx_target"], o["mode"],
                                 o["alpha"], o["tol"], o["maxit"], o["seed"], rc.threads)
    rows = [(r.L, r.lambda_min, r.C_obs, r.iterations, r.converged, r.local_min)
            for r in reports]
    _echo(rc, _prefix(o["out"]))
    write_csv(o["out"], ("L", "lambda_min", "C_obs", "iters", "converged", "local_min"),
              rows, rc.digest)
    for r in reports:
        if r.error:
            print(f"L={r.L!r}: {r.error}", file=sys.stderr)
    return 0


def _write_control(prefix: str, rc: RunConfig, problem, solution, status: str, message: str):
    h = solution.h
    ys = problem.grid.y()
    rows = [(t, y, h.values[j, k]) for k, t in enumerate(h.times) for j, y in enumerate(ys)]
    write_csv(f"{prefix}_h.csv", ("t", "y", "h"), rows, rc.digest)
    payload = {"status": status, "message": message, "residual": solution.residual,
               "iterations": solution.iterations, "terminal_error": solution.terminal_error,
               "thetaT_norm": solution.thetaT.norm(),
               "lambda_history": solution.lambda_history,
               "residual_history": solution.residual_history}
    write_json(f"{prefix}_sol.json", payload, rc.digest)


def cmd_control_synth(rc: RunConfig) -> int:
    o = rc.options
    nx, ny = _grid(o)
    grid = pde_core.Grid(o["L"], nx, ny)
    problem = hum_control.ControlProblem(make_field(o["u0"], grid), make_field(o["uT"], grid),
                                         o["T"], o["dt"], o["tol"], o["maxit"],
                                         stall_window=o["stall"])
    prefix = o["out"]
    _echo(rc, prefix)
    try:
        solution = hum_control.synthesize_control(problem)
    except NonConvergence as exc:
        partial = exc.info.get("solution")
        if partial is not None:
            hum_control.verify_control(problem, partial)
            status = "ill-conditioned" if type(exc).__name__ == "IllConditioned" else "not-converged"
            _write_control(prefix, rc, problem, partial, status, str(exc))
        raise
    hum_control.verify_control(problem, solution)
    _write_control(prefix, rc, problem, solution, "converged", "")
    return 0


def cmd_stabilize(rc: RunConfig) -> int:
    o = rc.options
    nx, ny = _grid(o)
    grid = pde_core.Grid(o["L"], nx, ny)
    u0 = make_field(o["u0"], grid)
    traj = stabilization.feedback_simulate(u0, o["alpha"], o["T"], o["dt"])
    prefix = o["out"]
    try:
        cert = stabilization.lyapunov_params(o["L"], o["alpha"], o["safety"])
        cert_payload = {"certified": True, **cert.to_dict()}
    except DomainError as exc:
        cert, cert_payload = None, {"certified": False, "reason": str(exc)}
    fit_payload: dict
    try:
        fit = stabilization.fit_decay(traj.times, traj.energy, (o["fit_t0"], o["T"]))
        fit_payload = {"mu": fit.mu, "amplitude": fit.amplitude,
                       "rms_log_residual": fit.rms_log_residual, "samples": fit.samples}
    except DomainError as exc:
        fit_payload = {"mu": None, "reason": str(exc)}
    if cert is not None:
        chk = stabilization.check_decay_bound(traj, cert)
        cert_payload["bound_check"] = {"holds": chk.holds, "max_ratio": chk.max_ratio,
                                       "worst_time": chk.worst_time}
        verdict = "pass" if chk.holds else "fail"
    else:
        verdict = "not-certified"
    _echo(rc, prefix)
    write_csv(f"{prefix}_energy.csv", ENERGY_HEADER, _energy_rows(traj), rc.digest)
    write_json(f"{prefix}_certificate.json", cert_payload, rc.digest)
    write_json(f"{prefix}_fit.json", fit_payload, rc.digest)
    print(f"bound check: {verdict}")
    return 0


def cmd_lyapunov(rc: RunConfig) -> int:
    o = rc.options
    cert = stabilization.lyapunov_params(o["L"], o["alpha"], o["safety"])
    text = json_text(cert.to_dict(), rc.digest)
    if o["out"]:
        _echo(rc, o["out"])
        write_bytes_atomic(f"{o['out']}_certificate.json", text.encode())
    sys.stdout.write(text)
    return 0


DISPATCH = {
    "crit enumerate": cmd_crit_enumerate,
    "crit check": cmd_crit_check,
    "spectral report": cmd_spectral_report,
    "spectral scan": cmd_spectral_scan,
    "simulate": cmd_simulate,
    "observability scan": cmd_observability_scan,
    "control synth": cmd_control_synth,
    "stabilize": cmd_stabilize,
    "lyapunov": cmd_lyapunov,
}


def run(rc: RunConfig) -> int:
    return DISPATCH[rc.command](rc)


def main(argv: Optional[list[str]] = None) -> int:
    argv = sys.argv[1:] if argv is None else list(argv)
    try:
        rc = parse_config(argv)
        return run(rc)
    except SystemExit as exc:  # --help
        return int(exc.code or 0)
    except UsageError as exc:
        print(f"usage error: {exc}", file=sys.stderr)
        return 1
    except NumericalError as exc:
        info = getattr(exc, "info", {})
        detail = {k: v for k, v in info.items() if isinstance(v, (int, float, str))}
        print(f"numerical failure: {exc} {json.dumps(detail) if detail else ''}".rstrip(),
              file=sys.stderr)
        return 2
    except (DomainError, Kp2Error) as exc:
        print(f"error: {exc}", file=sys.stderr)
        return 1
    except OSError as exc:
        print(f"error: {exc}", file=sys.stderr)
        return 1


if __name__ == "__main__":
    sys.exit(main())
