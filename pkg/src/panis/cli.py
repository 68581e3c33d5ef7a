"""Command-line front end.

Verbs: gen-basis, gen-data, train, predict, evaluate, sweep, gradcheck,
report. Global flags: --config <file>, --seed <u64>, --out <dir>,
--checkpoint <file>, --mode panis|mpanis. Exit codes: 0 success, 2 config
error, 3 numerical failure, 4 non-convergence.
"""

from __future__ import annotations

import argparse
import sys
from pathlib import Path

import numpy as np

from . import evaluation, pipeline, training
from .config import PRESETS, Config, load_config, preset_config
from .containers import write_container
from .errors import ConfigError, NonConvergenceError, NumericalError, PanisError
from .fem import ConstitutiveLaw
from .microstructure import sample_field


def _common() -> argparse.ArgumentParser:
    p = argparse.ArgumentParser(add_help=False)
    p.add_argument("--config", help="key-value config file")
    p.add_argument("--preset", choices=sorted(PRESETS), help="named preset")
    p.add_argument("--seed", type=int, help="RNG seed (overrides config)")
    p.add_argument("--out", default=".", help="output directory")
    p.add_argument("--checkpoint", help="checkpoint container")
    p.add_argument("--mode", choices=["panis", "mpanis"], help="surrogate mode")
    return p


def build_parser() -> argparse.ArgumentParser:
    parser = argparse.ArgumentParser(prog="panis", description=__doc__)
    sub = parser.add_subparsers(dest="verb", required=True)
    common = _common()

    sub.add_parser("gen-basis", parents=[common],
                   help="write the KLE basis container")
    p = sub.add_parser("gen-data", parents=[common],
                       help="generate a validation dataset")
    p.add_argument("--count", type=int, help="number of samples (default N_v)")
    sub.add_parser("train", parents=[common], help="train a surrogate")
    p = sub.add_parser("predict", parents=[common],
                       help="posterior bands for one input")
    p.add_argument("--data", help="validation container supplying the input")
    p.add_argument("--index", type=int, default=0, help="sample index in --data")
    p.add_argument("--pgm", action="store_true", help="also render PGM images")
    p = sub.add_parser("evaluate", parents=[common],
                       help="metrics of a checkpoint on a dataset")
    p.add_argument("--data", required=True, help="validation container")
    p = sub.add_parser("sweep", parents=[common],
                       help="out-of-distribution sweep")
    p.add_argument("--axis", required=True, choices=["vf", "bc", "alpha"])
    p.add_argument("--values", required=True,
                   help="comma-separated axis values (e.g. 0.1,0.5,0.9)")
    p.add_argument("--count", type=int, help="samples per cell")
    p = sub.add_parser("gradcheck", parents=[common],
                       help="finite-difference certification of the ELBO gradient")
    p.add_argument("--coords", type=int, default=20)
    p.add_argument("--tolerance", type=float,
                   help="max relative error (default 1e-4 linear, 1e-3 nonlinear)")
    p = sub.add_parser("report", parents=[common],
                       help="evaluation report with published reference columns")
    p.add_argument("--data", required=True, help="validation container")
    p.add_argument("--pgm", action="store_true", help="render field images")
    return parser


def _load_cfg(args) -> Config:
    overrides = {}
    if args.mode:
        overrides["mode"] = args.mode
    if args.seed is not None:
        overrides["seed"] = args.seed
    if args.config:
        return load_config(args.config, **overrides)
    if args.preset:
        return preset_config(args.preset, **overrides)
    cfg = Config(**overrides) if overrides else Config()
    return cfg.validate()


def _rng(cfg: Config) -> np.random.Generator:
    return np.random.default_rng(cfg.seed)


def _outdir(args) -> Path:
    out = Path(args.out)
    out.mkdir(parents=True, exist_ok=True)
    return out


def _restore(args):
    if not args.checkpoint:
        raise ConfigError("this verb needs --checkpoint")
    state, ops, cfg = pipeline.load_checkpoint(args.checkpoint)
    problem = pipeline.build_problem(cfg, ops=ops)
    return state, problem, cfg


def cmd_gen_basis(args) -> int:
    cfg = _load_cfg(args)
    problem = pipeline.build_problem(cfg, build_ops=False)
    kle = problem.microspec.kle
    fields = np.stack([kle.eigenfunction(i) for i in range(kle.truncation)])
    write_container(_outdir(args) / "basis.panisbox",
                    {"eigvals": kle.eigenvalues, "eigfuncs": fields},
                    config_text=cfg.effective_text())
    print(f"wrote {kle.truncation} modes "
          f"(captured energy {kle.captured_energy():.4f})")
    return 0


def cmd_gen_data(args) -> int:
    cfg = _load_cfg(args)
    problem = pipeline.build_problem(cfg, build_ops=False)
    vset = evaluation.gen_validation(problem, _rng(cfg), count=args.count)
    path = _outdir(args) / "validation.panisbox"
    evaluation.save_validation(path, vset, cfg.effective_text())
    print(f"wrote {vset.count} input-solution pairs to {path}")
    return 0


def cmd_train(args) -> int:
    cfg = _load_cfg(args)
    rng = _rng(cfg)
    problem = pipeline.build_problem(cfg)
    state = pipeline.init_state(cfg, problem, rng)
    settings = pipeline.make_train_settings(cfg)
    print(f"training {cfg.mode} surrogate: {state.trainable_count()} parameters, "
          f"N={cfg.n_weights} M={cfg.subsample} R={cfg.samples_per_step} "
          f"lambda={cfg.lam:g}")
    result = training.train(state, problem, settings, rng)
    out = _outdir(args)
    ckpt = Path(args.checkpoint) if args.checkpoint else out / "checkpoint.panisbox"
    pipeline.save_checkpoint(ckpt, result.state, problem.ops, cfg)
    result.trace.to_csv(out / "elbo_trace.csv")
    if result.aborted:
        print(f"training aborted ({result.reason}); last good state saved to {ckpt}")
        return 3
    status = "converged" if result.converged else "step budget exhausted"
    print(f"{status} after {result.steps_run} steps; checkpoint at {ckpt}")
    return 0


def cmd_predict(args) -> int:
    state, problem, cfg = _restore(args)
    if args.data:
        vset = evaluation.load_validation(args.data)
        c_field = vset.c[args.index]
    else:
        c_field = sample_field(problem.microspec, rng=_rng(cfg)).c
    bands = evaluation.predict(state, c_field, problem)
    out = _outdir(args)
    write_container(out / "prediction.panisbox", {
        "c": c_field, "u_mean": bands.mean, "u_sigma": bands.sigma,
        "u_upper": bands.upper, "u_lower": bands.lower,
    }, config_text=cfg.effective_text())
    if args.pgm:
        for name, fld in (("mean", bands.mean), ("sigma", bands.sigma)):
            evaluation.write_pgm(out / f"prediction_{name}.pgm", fld)
    print(f"prediction written to {out / 'prediction.panisbox'}")
    return 0


def cmd_evaluate(args) -> int:
    state, problem, cfg = _restore(args)
    vset = evaluation.load_validation(args.data)
    report = evaluation.evaluate_state(state, problem, vset, label="evaluate")
    report.to_csv(_outdir(args) / "evaluation.csv")
    print(report.to_text(), end="")
    return 0


def cmd_sweep(args) -> int:
    state, problem, cfg = _restore(args)
    axis = args.axis
    raw = [v.strip() for v in args.values.split(",") if v.strip()]
    values = raw if axis == "bc" else [float(v) for v in raw]
    report = evaluation.sweep(state, problem, axis, values, _rng(cfg),
                              count=args.count)
    report.to_csv(_outdir(args) / f"sweep_{axis}.csv")
    print(report.to_text(), end="")
    return 0


def cmd_gradcheck(args) -> int:
    if args.checkpoint:
        state, problem, cfg = _restore(args)
    else:
        cfg = _load_cfg(args)
        problem = pipeline.build_problem(cfg)
        state = pipeline.init_state(cfg, problem, _rng(cfg))
    settings = pipeline.make_train_settings(cfg)
    law = ConstitutiveLaw(alpha=cfg.alpha, u_bar=cfg.u_bar)
    if not law.is_linear:
        settings.newton_tol = min(settings.newton_tol, 1e-13)
    tol = args.tolerance or (1e-4 if law.is_linear else 1e-3)
    rows = training.gradient_check(state, problem, law, settings,
                                   _rng(cfg), n_coords=args.coords)
    worst = 0.0
    for name, idx, analytic, numeric, rel in rows:
        worst = max(worst, rel)
        print(f"{name}[{idx}]: analytic {analytic: .6e}  "
              f"numeric {numeric: .6e}  rel {rel:.2e}")
    print(f"worst relative error {worst:.2e} over {len(rows)} coordinates "
          f"(tolerance {tol:g})")
    if worst > tol:
        raise NumericalError(f"gradient check failed: {worst:.2e} > {tol:g}")
    return 0


def cmd_report(args) -> int:
    state, problem, cfg = _restore(args)
    vset = evaluation.load_validation(args.data)
    report = evaluation.evaluate_state(state, problem, vset, label="report")
    out = _outdir(args)
    text = report.to_text()
    from . import published

    lines = [text, f"reference columns are {published.REFERENCE_LABEL}:"]
    ref = (published.bc_reference(vset.bc_name, nonlinear=vset.alpha != 0,
                                  multiscale=state.mode == "mpanis")
           or published.vf_reference(cfg.volume_fraction,
                                     nonlinear=vset.alpha != 0,
                                     multiscale=state.mode == "mpanis"))
    for k, v in ref.items():
        lines.append(f"  {k} = {v}")
    (out / "report.txt").write_text("\n".join(lines) + "\n", encoding="utf-8")
    report.to_csv(out / "report.csv")
    if args.pgm and vset.count:
        bands = evaluation.predict(
            state, vset.c[0], problem,
            eval_coords=np.linspace(0, 1, vset.grid))
        evaluation.write_pgm(out / "report_mean.pgm", bands.mean)
        evaluation.write_pgm(out / "report_sigma.pgm", bands.sigma)
        evaluation.write_pgm(out / "report_error.pgm", np.abs(bands.mean - vset.u[0]))
    print("\n".join(lines))
    return 0


_COMMANDS = {
    "gen-basis": cmd_gen_basis,
    "gen-data": cmd_gen_data,
    "train": cmd_train,
    "predict": cmd_predict,
    "evaluate": cmd_evaluate,
    "sweep": cmd_sweep,
    "gradcheck": cmd_gradcheck,
    "report": cmd_report,
}


def main(argv=None) -> int:
    args = build_parser().parse_args(argv)
    try:
        return _COMMANDS[args.verb](args)
    except ConfigError as exc:
        print(f"config error: {exc}", file=sys.stderr)
        return 2
    except NonConvergenceError as exc:
        print(f"non-convergence: {exc}", file=sys.stderr)
        return 4
    except (NumericalError, PanisError) as exc:
        print(f"numerical failure: {exc}", file=sys.stderr)
        return 3


def entry() -> None:
    sys.exit(main())


if __name__ == "__main__":
    entry()
