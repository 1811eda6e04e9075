"""Command-line entry points.

Exit codes: 0 success, 1 numerical failure, 2 usage or parse error.  The
environment variable ``STATPOD_SEED`` overrides the ``seed`` key of any
config file.
"""
from __future__ import annotations

import argparse
import hashlib
import logging
import os
import sys
import time
from pathlib import Path

import numpy as np

from . import io as sio
from .exceptions import InvalidParameterError, SampleFailure, StatPodError

SEED_ENV = "STATPOD_SEED"
EXIT_OK, EXIT_NUMERICAL, EXIT_USAGE = 0, 1, 2

logger = logging.getLogger("statpod")


class UsageError(Exception):
    pass


def _load_config(path):
    values = {} if path is None else sio.read_config(path)
    if SEED_ENV in os.environ:
        values["seed"] = os.environ[SEED_ENV]
    return sio.Config(values, str(path or "<defaults>"))


def _digest(cfg: sio.Config):
    text = "\n".join(f"{k}={cfg.values[k]}" for k in sorted(cfg.values))
    return hashlib.sha256(text.encode()).hexdigest()[:16]


# ---------------------------------------------------------------------------
# problem description shared by all subcommands

PROBLEM_KEYS = ("n_side", "nu", "alpha", "T", "n_t", "y0", "sigma", "gamma", "M")


def _burgers_config(cfg: sio.Config):
    from .burgers2d import BurgersConfig
    from .qbsys import RandomFieldIC

    problem = cfg.get_str("problem", "burgers")
    if problem != "burgers":
        raise sio.ConfigError(f"{cfg.source}: unknown problem {problem!r}")
    M = cfg.get_int("M", 8)
    ic = RandomFieldIC(mean=cfg.get_float("y0", 0.05), M1=M, M2=M,
                       gamma=cfg.get_float("gamma", 4.0), sigma=cfg.get_float("sigma", 0.05))
    return BurgersConfig(n_side=cfg.get_int("n_side", 17), nu=cfg.get_float("nu", 0.02),
                         alpha=cfg.get_float("alpha", 0.0), T=cfg.get_float("T", 50.0),
                         n_t=cfg.get_int("n_t", 100), ic=ic)


def _problem_meta(bc):
    return {"n_side": bc.n_side, "nu": repr(bc.nu), "alpha": repr(bc.alpha), "T": repr(bc.T),
            "n_t": bc.n_t, "y0": repr(float(bc.ic.mean)), "sigma": repr(bc.ic.sigma),
            "gamma": repr(bc.ic.gamma), "M": bc.ic.M1}


def _config_from_meta(meta):
    return sio.Config({k: meta[k] for k in PROBLEM_KEYS if k in meta}, "<artifact header>")


def _load_model(path):
    from .burgers2d import assemble
    model, R, box, meta = sio.read_reduced_model(path)
    problem = assemble(_burgers_config(_config_from_meta(meta)))
    if problem.system.dim != model.basis.shape[0]:
        raise InvalidParameterError("reduced-model basis does not match the problem dimension")
    return model, R, box, meta, problem


def _load_tts(paths, ell):
    from .riccati import FeedbackLaw
    tts = []
    for p in paths or ():
        tt, _ = sio.read_tt(p)
        if tt.dim != ell:
            raise InvalidParameterError(f"{p}: TT has {tt.dim} variables, model has {ell}")
        tts.append(tt)
    if not tts:
        return None
    return FeedbackLaw("TT", lambda x: np.array([t(x) for t in tts]))


def _laws(model, R, tt_paths):
    from .riccati import lqr_law, sdre_law
    form = model.semilinear_form(R)
    laws = {"LQR": lqr_law(form, basis=model.basis), "SDRE": sdre_law(form, basis=model.basis)}
    tt = _load_tts(tt_paths, model.dim)
    if tt is not None:
        laws["TT"] = tt.with_basis(model.basis)
    return laws


def _test_ics(cfg: sio.Config, problem):
    from .burgers2d import cosine_ic
    ics = {}
    for name in cfg.get_str("ics", "constant,cosine").replace(",", " ").split():
        if name == "constant":
            ics[name] = problem.config.ic.mean_field(problem.grid)
        elif name == "cosine":
            ics[name] = cosine_ic(problem.grid)
        else:
            raise sio.ConfigError(f"{cfg.source}: unknown initial condition {name!r}")
    for s in cfg.get_int_list("test_seeds", []):
        ics[f"seed{s}"] = problem.initial_condition(seed=s)
    if not ics:
        raise sio.ConfigError(f"{cfg.source}: no test initial conditions")
    return ics


# ---------------------------------------------------------------------------
# subcommands


def cmd_offline(args):
    from .spod import offline_stage

    cfg = _load_config(args.config)
    bc = _burgers_config(cfg)
    N = cfg.get_int("N", sio.REQUIRED)
    eps = cfg.get_float("eps", None)
    ell = cfg.get_int("ell", None)
    if (eps is None) == (ell is None):
        raise sio.ConfigError(f"{cfg.source}: give exactly one of eps and ell")
    seed = cfg.get_int("seed", 0)
    mode = cfg.get_str("mode", "plain")
    cfg.check_used()
    from .burgers2d import assemble
    problem = assemble(bc)
    try:
        model, report = offline_stage(problem, N, eps=eps, ell=ell, mode=mode,
                                      seeds=range(seed, seed + N))
    except SampleFailure as exc:
        print(f"error: sample {exc.sample_index} failed: {exc}", file=sys.stderr)
        return EXIT_NUMERICAL
    from .burgers2d import feedback_box
    meta = dict(_problem_meta(bc), seed=seed, digest=_digest(cfg), mode=mode)
    out = Path(args.out)
    sio.write_reduced_model(out, model, problem.R, feedback_box(problem, model), meta)
    sv_path = Path(args.sv) if args.sv else out.with_suffix(".sv.csv")
    rows = [{"index": i + 1, "singular_value": float(v)} for i, v in enumerate(model.singular_values)]
    sio.write_report(sv_path, rows, ["index", "singular_value"], {"seed": seed, "digest": _digest(cfg)})
    print(f"ell={model.dim} samples={N} offline_time={report.total_time:.3f}s")
    return EXIT_OK


def cmd_ttcross(args):
    from .ftt import CrossConfig, tt_feedback_law

    cfg = _load_config(args.config)
    cross = CrossConfig(tolerance=cfg.get_float("tolerance", 1e-3),
                        max_rank=cfg.get_int("max_rank", 20),
                        max_sweeps=cfg.get_int("max_sweeps", 20), n=cfg.get_int("n", 6),
                        initial_rank=cfg.get_int("initial_rank", 1),
                        n_validation=cfg.get_int("n_validation", 1000), seed=cfg.get_int("seed", 0))
    law_name = cfg.get_str("law", "sdre").upper()
    cfg.check_used()
    model, R, box, meta, problem = _load_model(args.model)
    laws = _laws(model, R, None)
    if law_name not in laws:
        raise sio.ConfigError(f"unknown source law {law_name!r}")
    if not np.all(box[:, 1] > box[:, 0]):
        raise InvalidParameterError("reduced-model artifact has no snapshot box")
    source = laws[law_name].with_basis(None)
    law = tt_feedback_law(source, box, cross, control_dim=model.B.shape[1],
                          fallback=laws["LQR"].with_basis(None))
    status = EXIT_OK
    for j, tt in enumerate(law.metadata["tts"]):
        path = Path(f"{args.out}.tt{j}.txt")
        sio.write_tt(path, tt, {"seed": cross.seed, "digest": _digest(cfg), "source": law_name})
        print(f"component {j}: ranks={','.join(map(str, tt.ranks))} "
              f"validation_error={tt.info['validation_error']:.3e} converged={int(tt.converged)}")
        if not tt.converged:
            status = EXIT_NUMERICAL
    return status


def _full_defn(problem):
    from .pmp import OcpDefinition
    bc = problem.config
    return OcpDefinition(problem.system, problem.Q, problem.R, bc.T, bc.n_t)


def cmd_simulate(args):
    from .evalrisk import run_full

    cfg = _load_config(args.config)
    model, R, _, meta, problem = _load_model(args.model)
    ics = _test_ics(cfg, problem)
    cfg.get_int("seed", 0)
    cfg.check_used()
    laws = _laws(model, R, args.tt)
    defn = _full_defn(problem)
    rows = []
    for ic_name, ic in ics.items():
        for name, law in laws.items():
            t0 = time.perf_counter()
            _, J = run_full(defn, ic, law)
            rows.append({"ell": model.dim, "method": name, "ic": ic_name, "cost": float(J),
                         "time": time.perf_counter() - t0})
    _emit(args.out, rows, ["ell", "method", "ic", "cost", "time"], cfg)
    return EXIT_OK


def cmd_report(args):
    from .evalrisk import indicators, reduced_pmp_controller, full_pmp_controller

    cfg = _load_config(args.config)
    model, R, _, meta, problem = _load_model(args.model)
    ics = _test_ics(cfg, problem)
    reference_name = cfg.get_str("reference", "full-pmp")
    cfg.get_int("seed", 0)
    cfg.check_used()
    defn = _full_defn(problem)
    laws = _laws(model, R, args.tt)
    laws["reduced-pmp"] = reduced_pmp_controller(model, defn)
    laws["full-pmp"] = full_pmp_controller(defn)
    if reference_name not in laws:
        raise sio.ConfigError(f"unknown reference {reference_name!r}")
    reference = laws[reference_name]
    rows = []
    for name, law in laws.items():
        t0 = time.perf_counter()
        extra = {"tt_law": law, "tt_source": laws["SDRE"]} if name == "TT" else {}
        rep = indicators(defn, law, reference, list(ics.values()), **extra)
        cost = float(np.mean([r["J_red"] for r in rep.per_sample]))
        rows.append({"ell": model.dim, "method": name, "E_J": rep.E_J, "E_y": rep.E_y,
                     "E_TT": "" if rep.E_TT is None else rep.E_TT, "cost": cost,
                     "time": time.perf_counter() - t0})
    _emit(args.out, rows, ["ell", "method", "E_J", "E_y", "E_TT", "cost", "time"], cfg)
    return EXIT_OK


def cmd_validate_bound(args):
    from .evalrisk import LinearTestFamily, validate_risk_bound

    cfg = _load_config(args.config)
    seed = cfg.get_int("seed", 0)
    family = LinearTestFamily.default(d=cfg.get_int("d", 10), T=cfg.get_float("T", 2.0),
                                      noise=cfg.get_float("noise", 0.3), seed=seed)
    N_list = cfg.get_int_list("N", [10, 40, 160, 640])
    ell = cfg.get_int("ell", 3)
    reps = cfg.get_int("repetitions", 100)
    cfg.check_used()
    sweep = validate_risk_bound(family, N_list, ell, repetitions=reps, seed=seed)
    rows = []
    for N in N_list:
        reps_N = sweep.reports[N]
        rows.append({"N": N, "ell": ell, "hold_fraction": sweep.hold_fraction(N),
                     "expected_risk": float(np.mean([r.expected_risk for r in reps_N])),
                     "tail_star": reps_N[0].tail_star,
                     "bound_star": float(np.mean([r.bound_star for r in reps_N])),
                     "gap": sweep.gap(N)})
    _emit(args.out, rows, ["N", "ell", "hold_fraction", "expected_risk", "tail_star",
                           "bound_star", "gap"], cfg, extra_meta={"slope": repr(sweep.slope())})
    print(f"slope={sweep.slope():.3f} oracle_stable={int(sweep.oracle_stable)}")
    return EXIT_OK


def cmd_bench(args):
    from .evalrisk import timing_harness
    from .pmp import pmp_solve

    cfg = _load_config(args.config)
    evals = cfg.get_int("evals", 100)
    pmp_evals = cfg.get_int("pmp_evals", 3)
    with_full = cfg.get_int("full_pmp", 0)
    seed = cfg.get_int("seed", 0)
    cfg.check_used()
    model, R, box, meta, problem = _load_model(args.model)
    laws = {k: v.with_basis(None) for k, v in _laws(model, R, args.tt).items()}
    rng = np.random.default_rng(seed)
    states = box[:, 0] + (box[:, 1] - box[:, 0]) * rng.random((max(evals, 1), model.dim))
    red = model.ocp(R, problem.config.T, problem.config.n_t)
    timed = dict(laws)
    timed["reduced-pmp"] = lambda x: pmp_solve(red, x).controls[0]
    counts = {k: evals for k in laws}
    counts["reduced-pmp"] = pmp_evals
    if with_full:
        defn = _full_defn(problem)
        timed["full-pmp"] = lambda x: pmp_solve(defn, model.lift(x)).controls[0]
        counts["full-pmp"] = pmp_evals
    times = timing_harness(timed, states, min_evals=counts)
    rows = [{"ell": model.dim, "method": k, "time": v} for k, v in times.items()]
    _emit(args.out, rows, ["ell", "method", "time"], cfg)
    return EXIT_OK


def _emit(out, rows, columns, cfg, extra_meta=None):
    meta = {"digest": _digest(cfg)}
    if "seed" in cfg.values:
        meta["seed"] = cfg.values["seed"]
    meta.update(extra_meta or {})
    if out:
        sio.write_report(out, rows, columns, meta)
    else:
        sys.stdout.write(sio.report_text(rows, columns, meta))


# ---------------------------------------------------------------------------


class _Parser(argparse.ArgumentParser):
    def error(self, message):
        self.print_usage(sys.stderr)
        raise UsageError(message)


def build_parser():
    p = _Parser(prog="statpod", description="Statistical POD feedback control toolkit.")
    p.add_argument("-v", "--verbose", action="store_true")
    sub = p.add_subparsers(dest="command", required=True, parser_class=_Parser)

    s = sub.add_parser("offline", help="build a reduced model from sampled optimal trajectories")
    s.add_argument("config")
    s.add_argument("-o", "--out", required=True)
    s.add_argument("--sv", help="singular-value CSV (default: <out>.sv.csv)")
    s.set_defaults(func=cmd_offline)

    s = sub.add_parser("ttcross", help="compress a reduced feedback law into TT format")
    s.add_argument("model")
    s.add_argument("-c", "--config")
    s.add_argument("-o", "--out", required=True, help="prefix of the TT files")
    s.set_defaults(func=cmd_ttcross)

    for name, func, helptext in (("simulate", cmd_simulate, "closed-loop costs on the full model"),
                                 ("report", cmd_report, "error indicators against a reference"),
                                 ("bench", cmd_bench, "per-control evaluation times")):
        s = sub.add_parser(name, help=helptext)
        s.add_argument("model")
        s.add_argument("--tt", nargs="*", default=[], help="TT files, one per control component")
        s.add_argument("-c", "--config")
        s.add_argument("-o", "--out")
        s.set_defaults(func=func)

    s = sub.add_parser("validate-bound", help="Monte-Carlo check of the projection risk bound")
    s.add_argument("-c", "--config")
    s.add_argument("-o", "--out")
    s.set_defaults(func=cmd_validate_bound)
    return p


def main(argv=None):
    parser = build_parser()
    try:
        args = parser.parse_args(argv)
    except UsageError as exc:
        print(f"error: {exc}", file=sys.stderr)
        return EXIT_USAGE
    logging.basicConfig(level=logging.INFO if args.verbose else logging.WARNING,
                        format="%(levelname)s %(name)s: %(message)s")
    try:
        return args.func(args)
    except (FileNotFoundError, IsADirectoryError) as exc:
        print(f"error: {exc}", file=sys.stderr)
        return EXIT_USAGE
    except (sio.ConfigError, sio.ArtifactFormatError, InvalidParameterError) as exc:
        print(f"error: {exc}", file=sys.stderr)
        return EXIT_USAGE
    except StatPodError as exc:
        print(f"error: {type(exc).__name__}: {exc}", file=sys.stderr)
        return EXIT_NUMERICAL


if __name__ == "__main__":
    sys.exit(main())
