"""Command-line entry point: ``detkd <subcommand> [flags]``.

Exit codes: 0 success, 1 configuration or usage error, 2 numerical failure
(a NaN loss, a diverged run or a failed numerical check).
"""

from __future__ import annotations

import argparse
import csv
import json
import sys
from pathlib import Path

import numpy as np
from pydantic import ValidationError

from ..tensor import load_params, save_params
from .config import ConfigError, ExperimentConfig, MiConfig, format_errors, load_config, with_overrides

EXIT_OK = 0
EXIT_CONFIG = 1
EXIT_NUMERIC = 2
SUBCOMMANDS = ("train-teacher", "distill", "gradcheck", "oracle-check", "mi-bound", "match-hist", "corr-diff")


class UsageError(Exception):
    pass


class _Parser(argparse.ArgumentParser):
    def error(self, message):
        raise UsageError(message)


def build_parser() -> argparse.ArgumentParser:
    parser = _Parser(prog="detkd", description="Knowledge distillation experiments on toy detectors.")
    sub = parser.add_subparsers(dest="command", required=True, parser_class=_Parser)
    for name in SUBCOMMANDS:
        p = sub.add_parser(name)
        p.add_argument("--config", help="experiment config (JSON)")
        p.add_argument("--teacher", help="teacher checkpoint written by train-teacher")
        p.add_argument("--out", help="output directory")
        p.add_argument("--seed", type=int, help="single seed (overrides config seeds)")
        p.add_argument("--seeds", help="comma-separated seeds (overrides config seeds)")
        p.add_argument("--method", help="comma-separated method set overriding the config; 'none' for empty")
    return parser


# ---------------------------------------------------------------- helpers


def _seeds(args, default) -> tuple[int, ...]:
    if args.seed is not None and args.seeds is not None:
        raise UsageError("give --seed or --seeds, not both")
    if args.seed is not None:
        return (args.seed,)
    if args.seeds is not None:
        try:
            seeds = tuple(int(s) for s in args.seeds.split(",") if s.strip())
        except ValueError:
            raise UsageError(f"--seeds must be comma-separated integers, got {args.seeds!r}") from None
        if not seeds:
            raise UsageError("--seeds is empty")
        return seeds
    return tuple(default)


def _methods(args):
    if args.method is None:
        return None
    text = args.method.strip()
    if text in ("", "none"):
        return ()
    return tuple(m.strip() for m in text.split(",") if m.strip())


def _experiment(args) -> ExperimentConfig:
    if not args.config:
        raise UsageError("--config is required")
    cfg = load_config(args.config)
    changes = {"seeds": _seeds(args, cfg.seeds)}
    methods = _methods(args)
    if methods is not None:
        changes["methods"] = methods
    return with_overrides(cfg, **changes)


def _teacher_arrays(args):
    if not args.teacher:
        raise UsageError("--teacher is required")
    try:
        return load_params(args.teacher)
    except (OSError, ValueError, KeyError, json.JSONDecodeError) as err:
        raise ConfigError(f"cannot load teacher checkpoint {args.teacher}: {err}") from None


def _out_dir(args, required: bool = True) -> Path | None:
    if not args.out:
        if required:
            raise UsageError("--out is required")
        return None
    out = Path(args.out)
    out.mkdir(parents=True, exist_ok=True)
    return out


def write_report(path: Path, report: dict) -> None:
    """Sorted keys and fixed formatting so equal runs give equal bytes."""
    path.write_text(json.dumps(_plain(report), sort_keys=True, indent=2) + "\n")


def _plain(x):
    if isinstance(x, dict):
        return {str(k): _plain(v) for k, v in x.items()}
    if isinstance(x, (list, tuple)):
        return [_plain(v) for v in x]
    if isinstance(x, np.ndarray):
        return _plain(x.tolist())
    if isinstance(x, np.generic):
        return x.item()
    return x


def write_losses_csv(path: Path, runs: list[tuple[int, dict[str, list[float]]]]) -> None:
    with open(path, "w", newline="") as fh:
        w = csv.writer(fh, lineterminator="\n")
        w.writerow(["seed", "step", "component", "value"])
        for seed, losses in runs:
            for comp in losses:
                for step, value in enumerate(losses[comp]):
                    w.writerow([seed, step, comp, repr(float(value))])


def _summary(per_seed: list[dict]) -> dict:
    keys = sorted({k for r in per_seed for k, v in r["metrics"].items() if isinstance(v, float)})
    out = {}
    for k in keys:
        vals = np.array([r["metrics"][k] for r in per_seed])
        out[k] = {"mean": float(vals.mean()), "std": float(vals.std(ddof=1)) if len(vals) > 1 else 0.0}
    return out


def _base_report(command: str, cfg: ExperimentConfig | None) -> dict:
    report = {"format_version": 1, "command": command}
    if cfg is not None:
        report["config"] = cfg.model_dump(mode="json")
    return report


def _say(msg: str) -> None:
    print(msg, flush=True)


# ---------------------------------------------------------------- subcommands


def cmd_train_teacher(args) -> int:
    from .train import train_teacher

    cfg = _experiment(args)
    out = _out_dir(args)
    seed = cfg.seeds[0]
    result = train_teacher(cfg, seed)
    save_params(out / "teacher.json", result.teacher.named_parameters())
    report = _base_report("train-teacher", cfg)
    report.update({"seed": seed, "steps": len(result.losses), "metrics": result.metrics})
    write_report(out / "report.json", report)
    write_losses_csv(out / "losses.csv", [(seed, {"gt": result.losses})])
    _say(f"teacher accuracy {result.metrics['accuracy']:.4f}, refined IoU {result.metrics['refined_iou']:.4f}")
    return EXIT_OK


def _run_distill(cfg, arrays):
    from .train import distill

    runs = distill(cfg, arrays)
    per_seed = [
        {"seed": r.seed, "metrics": r.metrics, "final_losses": {c: v[-1] if v else 0.0 for c, v in r.losses.items()}}
        for r in runs
    ]
    return runs, per_seed


def cmd_distill(args) -> int:
    from .analysis import write_corr_csv

    cfg = _experiment(args)
    arrays = _teacher_arrays(args)
    out = _out_dir(args)
    runs, per_seed = _run_distill(cfg, arrays)
    report = _base_report("distill", cfg)
    report.update(
        {
            "methods": list(cfg.methods),
            "components": list(runs[0].losses),
            "steps": cfg.optim.steps,
            "per_seed": per_seed,
            "summary": _summary(per_seed),
        }
    )
    write_report(out / "report.json", report)
    write_losses_csv(out / "losses.csv", [(r.seed, r.losses) for r in runs])
    write_corr_csv(out / "corr.csv", np.mean([r.extras["corr_matrix"] for r in runs], axis=0))
    acc = report["summary"]["accuracy"]["mean"]
    _say(f"methods {list(cfg.methods) or ['baseline']}: mean accuracy {acc:.4f} over {len(runs)} seed(s)")
    return EXIT_OK


def cmd_corr_diff(args) -> int:
    from .analysis import write_corr_csv

    cfg = _experiment(args)
    arrays = _teacher_arrays(args)
    out = _out_dir(args)
    runs, per_seed = _run_distill(cfg, arrays)
    norms = [r.metrics["corr_diff_norm"] for r in runs]
    report = _base_report("corr-diff", cfg)
    report.update(
        {
            "methods": list(cfg.methods),
            "per_seed": [{"seed": r.seed, "norm": r.metrics["corr_diff_norm"]} for r in runs],
            "mean_norm": float(np.mean(norms)),
        }
    )
    write_report(out / "report.json", report)
    write_corr_csv(out / "corr.csv", np.mean([r.extras["corr_matrix"] for r in runs], axis=0))
    _say(f"mean correlation-difference norm {np.mean(norms):.4f} over {len(runs)} seed(s)")
    return EXIT_OK


def cmd_match_hist(args) -> int:
    from .analysis import match_experiment, write_hist_csv
    from .train import load_teacher

    # the method set is ignored: the analysis run always trains SGFI alone
    cfg = _experiment(args)
    teacher = load_teacher(cfg, _teacher_arrays(args))
    out = _out_dir(args)
    total = None
    per_seed = []
    for seed in cfg.seeds:
        result = match_experiment(cfg, teacher, seed)
        hist = result["histogram"]
        per_seed.append({"seed": seed, "counts": hist.as_dict(), "mode": hist.mode, "tau": result["tau"]})
        total = hist if total is None else type(hist)(hist.deltas, hist.counts + total.counts, hist.index_mode)
    report = _base_report("match-hist", cfg)
    report.update(
        {
            "index_mode": total.index_mode,
            "per_seed": per_seed,
            "counts": total.as_dict(),
            "total": total.total,
            "mode": total.mode,
            "mass_within_1": total.mass_within(1),
        }
    )
    write_report(out / "report.json", report)
    write_hist_csv(out / "hist.csv", total)
    _say(f"match histogram mode {total.mode} over {total.total} positive proposals")
    return EXIT_OK


def cmd_gradcheck(args) -> int:
    from .checks import GRAD_TOLERANCE, gradient_suite

    seeds = _seeds(args, (0,))
    out = _out_dir(args, required=False)
    rows, ok = [], True
    for seed in seeds:
        for rep in gradient_suite(seed):
            ok &= rep.passed
            rows.append({"seed": seed, "loss": rep.label, "max_rel_error": rep.max_error, "passed": rep.passed})
            _say(f"seed {seed} {rep.label:<16} max rel err {rep.max_error:.2e} {'ok' if rep.passed else 'FAIL'}")
    if out is not None:
        report = _base_report("gradcheck", None)
        report.update({"tolerance": GRAD_TOLERANCE, "checks": rows, "passed": bool(ok)})
        write_report(out / "report.json", report)
    return EXIT_OK if ok else EXIT_NUMERIC


def cmd_oracle_check(args) -> int:
    from .checks import ORACLE_TOLERANCE, oracle_suite

    seeds = _seeds(args, (0,))
    out = _out_dir(args, required=False)
    rows, ok = [], True
    for seed in seeds:
        diffs = oracle_suite(seed)
        worst = max(diffs)
        ok &= worst <= ORACLE_TOLERANCE
        rows.append({"seed": seed, "instances": len(diffs), "max_abs_diff": worst})
        _say(f"seed {seed}: {len(diffs)} instances, max |engine - oracle| {worst:.2e}")
    if out is not None:
        report = _base_report("oracle-check", None)
        report.update({"tolerance": ORACLE_TOLERANCE, "checks": rows, "passed": bool(ok)})
        write_report(out / "report.json", report)
    return EXIT_OK if ok else EXIT_NUMERIC


def _mi_config(args) -> tuple[MiConfig, tuple[int, ...]]:
    """The ``mi`` section and seeds of a full experiment config, or of a file holding only those."""
    if not args.config:
        return MiConfig(), (0,)
    try:
        doc = json.loads(Path(args.config).read_text())
    except OSError as err:
        raise ConfigError(f"cannot read config {args.config}: {err.strerror}") from None
    except json.JSONDecodeError as err:
        raise ConfigError(f"config {args.config} is not valid JSON: {err}") from None
    if isinstance(doc, dict) and set(doc) <= {"mi", "seeds"}:
        try:
            mc = MiConfig.model_validate(doc.get("mi", {}))
        except ValidationError as err:
            raise ConfigError("mi." + format_errors(err).replace("; ", "; mi.")) from None
        seeds = doc.get("seeds", [0])
        if not isinstance(seeds, list) or not seeds or not all(isinstance(s, int) for s in seeds):
            raise ConfigError("seeds: expected a non-empty list of integers")
        return mc, tuple(seeds)
    cfg = load_config(args.config)
    return cfg.mi, cfg.seeds


def cmd_mi_bound(args) -> int:
    from .analysis import mi_bound_experiment

    mc, default_seeds = _mi_config(args)
    seeds = _seeds(args, default_seeds)
    out = _out_dir(args)
    per_seed = []
    curves = []
    for seed in seeds:
        res = mi_bound_experiment(
            mc.rho, mc.dim, mc.k_list, mc.steps, seed, mc.batch, mc.lr0, mc.gamma, mc.eval_batches
        )
        entry = {"seed": seed, "per_k": {}}
        for k, v in res["per_k"].items():
            entry["per_k"][k] = {"loss": v["loss"], "bound": v["bound"]}
            curves.append((seed, {f"infonce_k{k}": v["curve"]}))
        per_seed.append(entry)
    true_mi = res["true_mi"]
    mean_bound = {k: float(np.mean([e["per_k"][k]["bound"] for e in per_seed])) for k in mc.k_list}
    report = _base_report("mi-bound", None)
    report.update(
        {"mi": mc.model_dump(mode="json"), "true_mi": true_mi, "per_seed": per_seed, "mean_bound": mean_bound}
    )
    write_report(out / "report.json", report)
    write_losses_csv(out / "losses.csv", curves)
    for k, b in mean_bound.items():
        _say(f"K={k}: bound {b:.4f} nats (true MI {true_mi:.4f})")
    return EXIT_OK


COMMANDS = {
    "train-teacher": cmd_train_teacher,
    "distill": cmd_distill,
    "gradcheck": cmd_gradcheck,
    "oracle-check": cmd_oracle_check,
    "mi-bound": cmd_mi_bound,
    "match-hist": cmd_match_hist,
    "corr-diff": cmd_corr_diff,
}


def cli_main(argv=None) -> int:
    from .train import NumericalFailure

    try:
        args = build_parser().parse_args(argv)
        return COMMANDS[args.command](args)
    except (UsageError, ConfigError) as err:
        print(f"error: {err}", file=sys.stderr)
        return EXIT_CONFIG
    except (NumericalFailure, FloatingPointError) as err:
        print(f"numerical failure: {err}", file=sys.stderr)
        return EXIT_NUMERIC


def main() -> None:
    sys.exit(cli_main())
