"""Command-line interface: ``mjpmix <subcommand> ...``.

Exit status is 0 on success, 1 on domain errors (a JSON error object is
written to stderr) and 2 on usage errors. Every output file gets a
``<out>.manifest.json`` sidecar describing the run.
"""
from __future__ import annotations

import argparse
import hashlib
import json
import math
import os
import sys
import time
from dataclasses import asdict
from pathlib import Path

import numpy as np

from . import __version__
from .analysis import (
    absorption_frequencies,
    absorption_probs,
    aic_scan,
    format_aic,
    format_mc_report,
    format_table,
    lrt,
    mc_study,
)
from .em import EmConfig, FitResult, e_step, fit, fit_constrained, m_step
from .errors import MjpmixError, ParseError
from .inference import EXCLUDE_BELOW, asymptotic_cov, covariance_from_info, louis_info
from .likelihood import ConstrainedParams, observed_loglik
from .model import IntensityMatrix, model_from_dict, model_to_dict
from .paths import cohort_stats, load_paths, paths_to_csv, paths_to_json
from .simulate import SimConfig, simulate_cohort


# ---------------------------------------------------------------- JSON output

def _plain(obj):
    if isinstance(obj, np.ndarray):
        return [_plain(x) for x in obj.tolist()]
    if isinstance(obj, (np.floating, float)):
        return float(obj)
    if isinstance(obj, (np.integer,)):
        return int(obj)
    if isinstance(obj, (np.bool_,)):
        return bool(obj)
    if isinstance(obj, dict):
        return {str(k): _plain(v) for k, v in obj.items()}
    if isinstance(obj, (list, tuple)):
        return [_plain(x) for x in obj]
    return obj


def _encode(obj, indent=0):
    pad = "  " * (indent + 1)
    end = "  " * indent
    if isinstance(obj, bool) or obj is None:
        return json.dumps(obj)
    if isinstance(obj, float):
        return format(obj, ".17g") if math.isfinite(obj) else "null"
    if isinstance(obj, (int, str)):
        return json.dumps(obj)
    if isinstance(obj, dict):
        if not obj:
            return "{}"
        items = [f"{pad}{json.dumps(k)}: {_encode(v, indent + 1)}" for k, v in obj.items()]
        return "{\n" + ",\n".join(items) + "\n" + end + "}"
    if isinstance(obj, list):
        if not obj:
            return "[]"
        if all(not isinstance(x, (dict, list)) for x in obj):
            return "[" + ", ".join(_encode(x) for x in obj) + "]"
        return "[\n" + ",\n".join(pad + _encode(x, indent + 1) for x in obj) + "\n" + end + "]"
    raise TypeError(f"cannot encode {type(obj).__name__}")


def dumps(obj) -> str:
    """Deterministic JSON with floats at 17 significant digits."""
    return _encode(_plain(obj)) + "\n"


def _read_json(path):
    try:
        with open(path, "r", encoding="utf-8") as fh:
            return json.load(fh)
    except json.JSONDecodeError as exc:
        raise ParseError(exc.msg, f"{path}: line {exc.lineno} column {exc.colno}") from None


def _sha256(path) -> str:
    h = hashlib.sha256()
    with open(path, "rb") as fh:
        for chunk in iter(lambda: fh.read(1 << 16), b""):
            h.update(chunk)
    return h.hexdigest()


def build_hash() -> str:
    """Digest of the package sources, standing in for a VCS revision."""
    h = hashlib.sha256()
    for p in sorted(Path(__file__).parent.glob("*.py")):
        h.update(p.name.encode())
        h.update(p.read_bytes())
    return h.hexdigest()[:12]


# ---------------------------------------------------------------- helpers

def _env(name, cast, default):
    raw = os.environ.get(f"MJPMIX_{name}")
    if raw is None:
        return default
    try:
        return cast(raw)
    except ValueError:
        raise SystemExit(f"mjpmix: invalid MJPMIX_{name}={raw!r}")


def _horizon(text: str) -> float:
    if text.lower() in ("inf", "infinity", "absorption"):
        return math.inf
    value = float(text)
    if not value > 0:
        raise argparse.ArgumentTypeError("horizon must be positive")
    return value


def _em_config(args) -> EmConfig:
    return EmConfig(tol=args.tol, max_iter=args.max_iter, seed=args.seed, restarts=args.restarts)


def _cohort(path):
    paths, space = load_paths(path)
    return cohort_stats(paths, space)


def fit_to_dict(res: FitResult, emit_weights: bool = False) -> dict:
    d = {
        "model": model_to_dict(res.model),
        "loglik": res.loglik,
        "loglik_trace": list(res.loglik_trace),
        "iterations": res.iterations,
        "converged": res.converged,
        "config": asdict(res.config),
        "permutation": list(res.permutation),
        "restart": res.restart,
        "flags": list(res.flags),
    }
    if res.constrained is not None:
        d["constrained"] = {"gamma": res.constrained.gamma,
                            "base_Q": res.constrained.base.entries}
    if emit_weights:
        d["weights"] = res.weights
    return d


def fit_from_dict(d: dict, cohort=None) -> FitResult:
    """Rebuild a FitResult. Without stored weights, one EM step from the stored
    model gives a weight/model pair satisfying the fixed-point identities."""
    model = model_from_dict(d["model"])
    cfg = EmConfig(**d.get("config", {}))
    weights = None
    constrained = None
    if "constrained" in d:
        c = d["constrained"]
        constrained = ConstrainedParams(np.asarray(c["gamma"]), IntensityMatrix(model.space, c["base_Q"]),
                                        model.phi)
    if d.get("weights") is not None:
        weights = np.asarray(d["weights"], dtype=float)
    elif cohort is not None:
        weights = e_step(cohort, model)
        if constrained is None:
            model, _ = m_step(cohort, weights, model.pi)
    loglik = d.get("loglik", observed_loglik(cohort, model) if cohort is not None else float("nan"))
    return FitResult(model=model, weights=weights, loglik_trace=d.get("loglik_trace", []),
                     iterations=d.get("iterations", 0), converged=d.get("converged", True), config=cfg,
                     loglik=loglik, constrained=constrained, permutation=tuple(d.get("permutation", ())),
                     flags=d.get("flags", []))


class Run:
    """Collects what the manifest needs while a subcommand executes."""

    def __init__(self, argv, args):
        self.argv = list(argv)
        self.args = args
        self.inputs = {}
        self.seeds = {}
        self.start = time.perf_counter()

    def input(self, path):
        self.inputs[str(path)] = _sha256(path)
        return path

    def emit(self, payload: dict, text: str = ""):
        out = getattr(self.args, "out", None)
        if not out:
            sys.stdout.write(dumps(payload))
            return
        Path(out).write_text(dumps(payload), encoding="utf-8")
        self.manifest(out)
        if text:
            print(text)

    def manifest(self, out):
        config = {k: (str(v) if isinstance(v, float) and not math.isfinite(v) else v)
                  for k, v in vars(self.args).items() if k != "func"}
        m = {
            "command": self.argv,
            "config": config,
            "seeds": self.seeds,
            "inputs": self.inputs,
            "outputs": {str(out): _sha256(out)},
            "version": __version__,
            "build": build_hash(),
            "runtime_seconds": time.perf_counter() - self.start,
        }
        Path(f"{out}.manifest.json").write_text(dumps(m), encoding="utf-8")


# ---------------------------------------------------------------- subcommands

def cmd_simulate(run: Run, args):
    model = model_from_dict(_read_json(run.input(args.model)))
    cfg = SimConfig(count=args.paths, seed=args.seed, horizon=args.horizon,
                    until_absorption=args.until_absorption)
    run.seeds["simulate"] = args.seed
    paths, labels = simulate_cohort(model, cfg, workers=args.threads)
    if args.format == "csv":
        Path(args.out).write_text(paths_to_csv(paths, model.space), encoding="utf-8")
        run.manifest(args.out)
    else:
        run.emit(paths_to_json(paths, model.space))
    if args.labels:
        lines = ["path_id,regime"] + [f"{p.id},{m + 1}" for p, m in zip(paths, labels)]
        Path(args.labels).write_text("\n".join(lines) + "\n", encoding="utf-8")
        run.manifest(args.labels)
    return 0


def cmd_fit(run: Run, args):
    cohort = _cohort(run.input(args.paths))
    cfg = _em_config(args)
    run.seeds["init"] = args.seed
    res = (fit_constrained if args.constrained else fit)(cohort, args.regimes, cfg)
    rows = [[name, float(v)] for name, v in zip(_names(res.model), _values(res.model))]
    text = f"loglik {res.loglik:.6f}  iterations {res.iterations}\n" + format_table(["parameter", "estimate"], rows)
    run.emit(fit_to_dict(res, args.emit_weights), text)
    return 0


def _names(model):
    from .likelihood import ParamIndex
    return ParamIndex.for_model(model).names()


def _values(model):
    from .likelihood import ParamIndex
    return ParamIndex.for_model(model).values(model)


def cmd_stderr(run: Run, args):
    cohort = _cohort(run.input(args.paths))
    res = fit_from_dict(_read_json(run.input(args.fit)), cohort)
    info = louis_info(cohort, res, args.exclude_below, phi_form=args.phi_form)
    rep = covariance_from_info(info)
    params = []
    index = info.index
    se = dict(zip(rep.names, rep.se))
    for k in range(len(index)):
        name = index.name(k)
        params.append({"name": name, "estimate": float(info.estimates[k]),
                       "se": float(se[name]) if name in se else None, "excluded": name not in se})
    payload = {"parameters": params, "covariance": {"names": rep.names, "matrix": rep.cov},
               "condition_number": rep.condition_number, "flags": rep.flags, "phi_form": args.phi_form}
    text = format_table(["parameter", "estimate", "SE"],
                        [[p["name"], p["estimate"], "n/a" if p["se"] is None else p["se"]] for p in params])
    run.emit(payload, text)
    return 0


def cmd_asymcov(run: Run, args):
    model = model_from_dict(_read_json(run.input(args.model)))
    sig = asymptotic_cov(model, args.horizon)
    payload = {"names": sig.names, "matrix": sig.matrix,
               "horizon": "inf" if math.isinf(args.horizon) else args.horizon}
    run.emit(payload, format_table(["parameter", "asymptotic variance"],
                                   [[n, float(v)] for n, v in zip(sig.names, np.diag(sig.matrix))], ".6g"))
    return 0


def cmd_aic(run: Run, args):
    cohort = _cohort(run.input(args.paths))
    rows = aic_scan(cohort, args.max_regimes, _em_config(args))
    payload = {"rows": [{"M": r.M, "loglik": r.loglik, "num_params": r.num_params, "aic": r.aic,
                         "converged": r.converged, "best": r.best} for r in rows]}
    run.emit(payload, format_aic(rows))
    return 0


def cmd_lrt(run: Run, args):
    cohort = _cohort(run.input(args.paths))
    res = lrt(cohort, _em_config(args))
    payload = {"stat": res.stat, "df": res.df, "p_value": res.p_value,
               "loglik_general": res.loglik_general, "loglik_constrained": res.loglik_constrained,
               "gamma": res.constrained.constrained.gamma}
    text = (f"-2 log Lambda = {res.stat:.3f}  df = {res.df}  p = {res.p_value:.5f}\n"
            f"loglik general {res.loglik_general:.6f}  constrained {res.loglik_constrained:.6f}")
    run.emit(payload, text)
    return 0


def cmd_absorb(run: Run, args):
    d = _read_json(run.input(args.fit))
    model = model_from_dict(d["model"] if "model" in d else d)
    sp = model.space
    payload = {"destinations": [sp.label(j) for j in sp.absorbing], "regimes": []}
    lines = []
    for m, q in enumerate(model.regimes):
        F = absorption_probs(q)
        payload["regimes"].append({"F": F.F, "unreachable": [sp.label(i) for i in F.unreachable]})
        lines.append(f"regime {m + 1}")
        lines.append(format_table(["from"] + payload["destinations"],
                                  [[sp.label(i)] + [float(x) for x in F.F[i]] for i in sp.transient], ".4f"))
    if args.paths:
        cohort = _cohort(run.input(args.paths))
        fr = absorption_frequencies(model, cohort)
        payload["expected_counts"] = fr.counts
        payload["initial_uncensored"] = fr.initial_uncensored
        payload["observed_uncensored"] = int((~cohort.censored).sum())
        lines.append(format_table(["regime"] + payload["destinations"],
                                  [[m + 1] + [float(x) for x in fr.counts[m]] for m in range(model.num_regimes)],
                                  ".2f"))
    run.emit(payload, "\n".join(lines))
    return 0


def cmd_mc_study(run: Run, args):
    truth = model_from_dict(_read_json(run.input(args.model)))
    Ks = [int(k) for k in args.paths_per.split(",") if k.strip()]
    run.seeds["study"] = args.seed
    rep = mc_study(truth, Ks, args.replications, _em_config(args), args.seed, args.horizon,
                   with_se=not args.no_se, workers=args.threads, phi_form=args.phi_form)
    payload = {"names": rep.names, "truth": rep.truth, "replications": rep.replications, "seed": rep.seed,
               "results": {str(K): {k: v for k, v in s.items()} for K, s in rep.per_K.items()},
               "failures": {str(K): f for K, f in rep.failures.items()},
               "valid": {str(K): rep.valid(K) for K in Ks}}
    run.emit(payload, format_mc_report(rep))
    return 0


# ---------------------------------------------------------------- parser

def build_parser() -> argparse.ArgumentParser:
    p = argparse.ArgumentParser(prog="mjpmix", description=__doc__.splitlines()[0])
    p.add_argument("--version", action="version", version=f"mjpmix {__version__} ({build_hash()})")
    sub = p.add_subparsers(dest="command", required=True)

    def common(sp, out_required=False):
        sp.add_argument("--out", required=out_required, help="output JSON file (stdout if omitted)")
        sp.add_argument("--threads", type=int, default=_env("THREADS", int, os.cpu_count() or 1))

    def em_flags(sp):
        sp.add_argument("--tol", type=float, default=_env("TOL", float, 1e-4))
        sp.add_argument("--max-iter", type=int, default=_env("MAX_ITER", int, 10000))
        sp.add_argument("--seed", type=int, default=_env("SEED", int, 0))
        sp.add_argument("--restarts", type=int, default=_env("RESTARTS", int, 1))

    s = sub.add_parser("simulate", help="simulate sample paths from a model")
    s.add_argument("--model", required=True)
    s.add_argument("--paths", type=int, required=True, help="number of paths K")
    g = s.add_mutually_exclusive_group(required=True)
    g.add_argument("--horizon", type=_horizon)
    g.add_argument("--until-absorption", action="store_true")
    s.add_argument("--seed", type=int, default=_env("SEED", int, 0))
    s.add_argument("--labels", help="optional CSV of hidden regime labels")
    s.add_argument("--format", choices=["json", "csv"], default="json")
    common(s, out_required=True)
    s.set_defaults(func=cmd_simulate)

    s = sub.add_parser("fit", help="fit a mixture by EM")
    s.add_argument("--paths", required=True)
    s.add_argument("--regimes", type=int, required=True)
    s.add_argument("--constrained", action="store_true")
    s.add_argument("--emit-weights", action="store_true")
    em_flags(s)
    common(s)
    s.set_defaults(func=cmd_fit)

    s = sub.add_parser("stderr", help="Louis standard errors of a fit")
    s.add_argument("--fit", required=True)
    s.add_argument("--paths", required=True)
    s.add_argument("--exclude-below", type=float, default=_env("EXCLUDE_BELOW", float, EXCLUDE_BELOW))
    s.add_argument("--phi-form", choices=["lagrangian", "exact"], default="lagrangian")
    common(s)
    s.set_defaults(func=cmd_stderr)

    s = sub.add_parser("asymcov", help="asymptotic covariance of the MLEs")
    s.add_argument("--model", required=True)
    s.add_argument("--horizon", type=_horizon, required=True, help="end-of-study time or 'inf'")
    common(s)
    s.set_defaults(func=cmd_asymcov)

    s = sub.add_parser("aic", help="AIC over M = 1..max")
    s.add_argument("--paths", required=True)
    s.add_argument("--max-regimes", type=int, default=6)
    em_flags(s)
    common(s)
    s.set_defaults(func=cmd_aic)

    s = sub.add_parser("lrt", help="constrained vs general two-regime likelihood-ratio test")
    s.add_argument("--paths", required=True)
    em_flags(s)
    common(s)
    s.set_defaults(func=cmd_lrt)

    s = sub.add_parser("absorb", help="absorption probabilities and expected absorption counts")
    s.add_argument("--fit", required=True, help="fit.json or model.json")
    s.add_argument("--paths")
    common(s)
    s.set_defaults(func=cmd_absorb)

    s = sub.add_parser("mc-study", help="Monte-Carlo study of bias, RMSE and standard errors")
    s.add_argument("--model", required=True)
    s.add_argument("--paths-per", default="800,1200,2000")
    s.add_argument("--replications", type=int, default=200)
    s.add_argument("--horizon", type=_horizon, default=30.0)
    s.add_argument("--no-se", action="store_true")
    s.add_argument("--phi-form", choices=["lagrangian", "exact"], default="lagrangian")
    em_flags(s)
    common(s)
    s.set_defaults(func=cmd_mc_study)
    return p


def dispatch(argv) -> int:
    parser = build_parser()
    try:
        args = parser.parse_args(argv)
    except SystemExit as exc:
        return int(exc.code or 0)
    run = Run(argv, args)
    try:
        return args.func(run, args)
    except MjpmixError as exc:
        sys.stderr.write(json.dumps(exc.to_dict()) + "\n")
        return 1
    except (OSError, ValueError) as exc:
        sys.stderr.write(json.dumps({"error": exc.__class__.__name__, "message": str(exc)}) + "\n")
        return 1


def main(argv=None) -> int:
    return dispatch(sys.argv[1:] if argv is None else argv)


if __name__ == "__main__":
    sys.exit(main())
