"""Batch front-end: ``pbctune <command> --config run.json [--out DIR]``.

Every command writes its artifacts into the output directory and prints the
main JSON document to stdout.  Exit codes: 0 success, 1 usage or config
error, 2 admissibility failure (including rules applied outside their scope),
3 numerical failure.
"""

from __future__ import annotations

import argparse
import json
import sys
from pathlib import Path

import numpy as np

from .canonical import j2_mismatch, to_canonical
from .closedloop import check_assumption2, kint_admissible, stationarity_residual
from .config import (
    ConfigError,
    RunConfig,
    apply_overrides,
    initial_state,
    load_config,
    make_gains,
    make_generator,
    make_model,
    make_region,
    make_sim_config,
    make_target,
)
from .errors import (
    AdmissibilityError,
    DivergenceError,
    InfeasibleError,
    ModelInvariantError,
    NotCanonicalizableError,
    ScopeError,
    UnsupportedConfigurationError,
)
from .lyap import es_iss_report
from .model import check_equilibrium
from .sim import energy_audit, envelope_check, metrics, simulate, steady_state_offset, trajectory_csv
from .spectral import circles_csv, circles_svg, oscillation_free, spectral_report

EXIT_OK, EXIT_CONFIG, EXIT_ADMISSIBILITY, EXIT_NUMERICAL = 0, 1, 2, 3
COMMANDS = ("analyze", "simulate", "circles", "tune-damping", "report")


def _jsonable(obj):
    if isinstance(obj, dict):
        return {str(k): _jsonable(v) for k, v in obj.items()}
    if isinstance(obj, (list, tuple)):
        return [_jsonable(v) for v in obj]
    if isinstance(obj, np.ndarray):
        return _jsonable(obj.tolist())
    if isinstance(obj, (bool, np.bool_)):
        return bool(obj)
    if isinstance(obj, (int, np.integer)):
        return int(obj)
    if isinstance(obj, (float, np.floating)):
        x = float(obj)
        # JSON has no inf/nan literals
        return x if np.isfinite(x) else str(x)
    return obj


def dumps(doc: dict) -> str:
    return json.dumps(_jsonable(doc), sort_keys=True, indent=2) + "\n"


class _Context:
    """Objects derived from one config, built lazily and shared between sections."""

    def __init__(self, cfg: RunConfig):
        self.cfg = cfg
        self.model = make_model(cfg)
        self.gains = make_gains(cfg, self.model)
        self.target = make_target(cfg, self.model, self.gains)
        self.region = make_region(cfg)
        if not self.region.contains(self.target.q_star):
            raise ConfigError("region must contain q_star")
        self.sim_cfg = make_sim_config(cfg)
        self.x0 = initial_state(cfg)
        self._spectral = None
        self._es = None

    def header(self) -> dict:
        c = self.cfg
        return {
            "model": c.model.name,
            "n": self.model.n,
            "m": self.model.m,
            "q_star": c.q_star,
            "seed": c.seed,
            "theta": c.theta,
            "samples_per_axis": c.region.samples_per_axis,
            "x0": self.x0,
        }

    def spectral(self):
        if self._spectral is None:
            self._spectral = spectral_report(self.target)
        return self._spectral

    def es_iss(self):
        if self._es is None:
            self._es = es_iss_report(
                self.target,
                self.region,
                self.x0,
                theta=self.cfg.theta,
                p_radius=self.cfg.region.p_radius,
                disturbance=self.sim_cfg.disturbance.full_vector(self.target.n),
            )
        return self._es


def assumption_section(ctx: _Context) -> dict:
    eq = check_equilibrium(ctx.model, ctx.target.q_star)
    conds = check_assumption2(ctx.target, ctx.region)
    kint = kint_admissible(ctx.model, ctx.gains, ctx.target.q_star)
    return {
        "equilibrium_residual": eq.residual,
        "stationarity_residual": stationarity_residual(ctx.target),
        "conditions": {k: v.as_dict() for k, v in conds.items()},
        "kint_admissible": {"ok": kint.ok, "margin": kint.margin},
    }


def canonical_section(ctx: _Context) -> dict:
    gen = make_generator(ctx.cfg, ctx.target)
    form = to_canonical(ctx.target, gen, ctx.region, seed=ctx.cfg.seed)
    return {
        "generator": gen.describe(),
        "intrinsic": form.intrinsic,
        "j2_mismatch": j2_mismatch(ctx.target, gen, ctx.region, seed=ctx.cfg.seed),
    }


def analysis_document(ctx: _Context) -> dict:
    spec, _, _ = ctx.spectral()
    return {
        "config": ctx.header(),
        "assumptions": assumption_section(ctx),
        "es_iss": ctx.es_iss().as_dict(),
        "spectral": spec.as_dict(),
        "canonical": canonical_section(ctx),
    }


def simulation_document(ctx: _Context, with_envelope: bool = False) -> tuple[dict, str]:
    traj = simulate(ctx.target, ctx.x0, ctx.sim_cfg)
    met = metrics(traj, ctx.target.q_star)
    doc = {"metrics": met.as_dict(), "energy_max_increase": energy_audit(traj), "steady_state_offset": steady_state_offset(traj, ctx.target.q_star)}
    if with_envelope and ctx.sim_cfg.disturbance.kind == "none":
        env = envelope_check(traj, ctx.es_iss(), ctx.region)
        met.envelope_violations = env.violations
        doc["metrics"] = met.as_dict()
        doc["envelope"] = env.as_dict()
    return doc, trajectory_csv(traj)


def damping_document(ctx: _Context) -> dict:
    chk = oscillation_free(ctx.target)
    dd = ctx.target.at_equilibrium()["dd"]
    return {
        "min_damping_for_p5": float(np.sqrt(chk.rhs)),
        "min_damping_conservative": float(np.sqrt(chk.conservative_rhs)),
        "current_lambda_min_dd": float(np.linalg.eigvalsh(dd)[0]),
        "p5_holds": chk.holds,
        "conservative_holds": chk.conservative_holds,
    }


def _write(out: Path, name: str, text: str) -> str:
    path = out / name
    path.write_text(text)
    return str(path)


def run_command(command: str, cfg: RunConfig, out: Path, svg: bool = False) -> dict:
    """Execute one command; returns the document printed to stdout."""
    out.mkdir(parents=True, exist_ok=True)
    ctx = _Context(cfg)
    files = {}
    if command == "analyze":
        doc = analysis_document(ctx)
        _, circles, _ = ctx.spectral()
        files["report"] = _write(out, "analysis.json", dumps(doc))
        files["circles_csv"] = _write(out, "circles.csv", circles_csv(circles))
    elif command == "simulate":
        doc, csv_text = simulation_document(ctx)
        doc = {"config": ctx.header(), **doc}
        files["trajectory_csv"] = _write(out, "trajectory.csv", csv_text)
        files["metrics"] = _write(out, "metrics.json", dumps(doc))
    elif command == "circles":
        spec, circles, _ = ctx.spectral()
        doc = {"config": ctx.header(), "circles_defective": circles.defective, "min_circle_center_re": spec.min_circle_center_re}
        files["circles_csv"] = _write(out, "circles.csv", circles_csv(circles))
    elif command == "tune-damping":
        doc = {"config": ctx.header(), **damping_document(ctx)}
        files["tune_damping"] = _write(out, "tune_damping.json", dumps(doc))
    elif command == "report":
        doc = analysis_document(ctx)
        sim_doc, csv_text = simulation_document(ctx, with_envelope=True)
        doc["simulation"] = sim_doc
        _, circles, _ = ctx.spectral()
        files["trajectory_csv"] = _write(out, "trajectory.csv", csv_text)
        files["circles_csv"] = _write(out, "circles.csv", circles_csv(circles))
        files["report"] = _write(out, "report.json", dumps(doc))
    else:
        raise ConfigError(f"unknown command {command!r}")
    if svg and command in ("analyze", "circles", "report"):
        _, circles, _ = ctx.spectral()
        files["circles_svg"] = _write(out, "circles.svg", circles_svg(circles))
    doc["files"] = files
    return doc


class _Parser(argparse.ArgumentParser):
    def error(self, message):
        self.print_usage(sys.stderr)
        self.exit(EXIT_CONFIG, f"{self.prog}: error: {message}\n")


def _theta(text: str) -> float:
    v = float(text)
    if not 0.0 < v < 1.0:
        raise argparse.ArgumentTypeError("theta must lie in (0, 1)")
    return v


def _positive_int(text: str) -> int:
    v = int(text)
    if v < 1:
        raise argparse.ArgumentTypeError("must be a positive integer")
    return v


def build_parser() -> argparse.ArgumentParser:
    parser = _Parser(prog="pbctune", description="Tuning and certification of passivity-based controllers.")
    parser.add_argument("command", choices=COMMANDS)
    parser.add_argument("--config", required=True, help="JSON run configuration")
    parser.add_argument("--out", help="output directory (default: outputs.dir from the config)")
    parser.add_argument("--region-samples", type=_positive_int, help="grid points per configuration axis")
    parser.add_argument("--theta", type=_theta, help="ISS split parameter in (0, 1)")
    parser.add_argument("--seed", type=int, help="sampling seed")
    parser.add_argument("--svg", action="store_true", help="also render the eigenvalue circles as SVG")
    return parser


def main(argv=None) -> int:
    args = build_parser().parse_args(argv)
    try:
        cfg = apply_overrides(load_config(args.config), args.region_samples, args.theta, args.seed)
        out = Path(args.out if args.out is not None else cfg.outputs.dir)
        doc = run_command(args.command, cfg, out, args.svg)
    except (AdmissibilityError, NotCanonicalizableError, ScopeError) as exc:
        print(f"admissibility failure: {exc}", file=sys.stderr)
        return EXIT_ADMISSIBILITY
    except (InfeasibleError, DivergenceError, ModelInvariantError, np.linalg.LinAlgError) as exc:
        print(f"numerical failure: {exc}", file=sys.stderr)
        return EXIT_NUMERICAL
    except (ConfigError, UnsupportedConfigurationError, ValueError) as exc:
        # DimensionError and ParameterError are ValueErrors; LinAlgError is caught above
        print(f"config error: {exc}", file=sys.stderr)
        return EXIT_CONFIG
    sys.stdout.write(dumps(doc))
    if "assumptions" in doc and not doc["assumptions"]["kint_admissible"]["ok"]:
        print("admissibility failure: Kint Schur margin is not positive", file=sys.stderr)
        return EXIT_ADMISSIBILITY
    return EXIT_OK


if __name__ == "__main__":
    sys.exit(main())
