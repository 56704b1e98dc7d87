"""Command-line entry point: gen-data, train, eval, ablate, grad-check, report.

Every subcommand accepts ``--config FILE`` (flat ``key = value``) followed by
any number of ``--key value`` overrides; the last occurrence of a key wins.
Exit codes: 0 success, 1 runtime failure, 2 usage error.  Failures print a
single ``error: <kind>: <message>`` line on stderr.
"""

import argparse
import json
import logging
import os
import sys
import time
from dataclasses import replace

import numpy as np

from . import __version__
from . import config as cfgmod
from . import data as datamod
from .evaluation import (
    ConditionReport,
    evaluate_conditions,
    fisher_average,
    format_table,
    read_report_json,
    write_report_csv,
    write_report_json,
    write_scatter_plots,
)
from .model import LIMSSR, load_checkpoint, save_checkpoint
from .pcmi import CONDITIONS
from .training import SUITES, train

log = logging.getLogger("limssr")


class UsageError(Exception):
    pass


class _Parser(argparse.ArgumentParser):
    def __init__(self, *args, **kwargs):
        kwargs.setdefault("allow_abbrev", False)
        super().__init__(*args, **kwargs)

    def error(self, message):
        raise UsageError(f"{self.prog}: {message}")


# ---------------------------------------------------------------------------
# helpers
# ---------------------------------------------------------------------------


def _write_manifest(out, command, argv, cfg, status, **extra):
    man = {
        "command": command,
        "argv": list(argv),
        "version": __version__,
        "seed": cfg.seed,
        "data_seed": cfg.data_seed,
        "config": cfg.to_dict(),
        "status": status,
    }
    man.update(extra)
    with open(os.path.join(out, "run_manifest.json"), "w") as fh:
        json.dump(man, fh, indent=2, sort_keys=True)


def _load_split(path):
    """(train, test) from a gen-data directory; a bare dataset is treated as test only."""
    if os.path.isfile(os.path.join(path, "manifest.json")):
        return None, datamod.load(path)
    train_dir, test_dir = os.path.join(path, "train"), os.path.join(path, "test")
    if not os.path.isdir(train_dir) and not os.path.isdir(test_dir):
        raise datamod.ManifestNotFoundError(f"manifest not found: {os.path.join(path, 'manifest.json')}")
    tr = datamod.load(train_dir) if os.path.isdir(train_dir) else None
    te = datamod.load(test_dir) if os.path.isdir(test_dir) else None
    return tr, te


def _data(cfg, path):
    if path:
        return _load_split(path)
    return datamod.generate_split(cfg.synthetic(), cfg.n_train, cfg.n_test)


def _guarded(out, command, argv, cfg, body):
    """Run ``body()``; on failure mark the output directory incomplete and re-raise."""
    os.makedirs(out, exist_ok=True)
    _write_manifest(out, command, argv, cfg, "running")
    t0 = time.time()
    try:
        outputs = body() or {}
    except BaseException as exc:
        _write_manifest(out, command, argv, cfg, "incomplete", error=f"{type(exc).__name__}: {exc}")
        raise
    _write_manifest(out, command, argv, cfg, "complete", seconds=round(time.time() - t0, 3), outputs=outputs)
    return outputs


# ---------------------------------------------------------------------------
# subcommands
# ---------------------------------------------------------------------------


def cmd_gen_data(args, cfg, argv):
    def body():
        train_ds, test_ds = datamod.generate_split(cfg.synthetic(), cfg.n_train, cfg.n_test)
        datamod.save(train_ds, os.path.join(args.out, "train"))
        datamod.save(test_ds, os.path.join(args.out, "test"))
        return {"train": len(train_ds), "test": len(test_ds)}

    out = _guarded(args.out, "gen-data", argv, cfg, body)
    print(f"wrote {out['train']} train / {out['test']} test samples to {args.out}")
    return 0


def _fit(cfg, train_ds, out):
    mc = cfg.model(dims=train_ds.dims, T=train_ds.T)
    model = LIMSSR(mc)
    tc = cfg.train()
    ckpt = os.path.join(out, "model.ckpt")

    def checkpoint(epoch):
        save_checkpoint(model, os.path.join(out, f"model_epoch{epoch + 1}.ckpt"), {"epoch": epoch + 1})

    history = train(model, train_ds, tc, log_path=os.path.join(out, "train_log.csv"), checkpoint_fn=checkpoint)
    save_checkpoint(model, ckpt, {"epoch": tc.epochs, "run_config": cfg.to_dict()})
    model.vocab.write_manifest(os.path.join(out, "vocab.json"))
    return model, history


def cmd_train(args, cfg, argv):
    def body():
        train_ds, test_ds = _data(cfg, args.data)
        if train_ds is None:
            raise datamod.DatasetError(f"{args.data} holds no training split")
        model, history = _fit(cfg, train_ds, args.out)
        outputs = {"checkpoint": "model.ckpt", "log": "train_log.csv", "epochs": len(history)}
        if test_ds is not None:
            report = evaluate_conditions(model, test_ds)
            write_report_json(report, os.path.join(args.out, "report.json"))
            write_report_csv({"limssr": report}, os.path.join(args.out, "report.csv"))
            outputs["report"] = "report.json"
            print(format_table({"limssr": report}))
        return outputs

    _guarded(args.out, "train", argv, cfg, body)
    print(f"checkpoint written to {os.path.join(args.out, 'model.ckpt')}")
    return 0


def cmd_eval(args, cfg, argv):
    def body():
        model, _ = load_checkpoint(args.checkpoint)
        _, test_ds = _load_split(args.data) if args.data else _data(cfg, None)
        if test_ds is None:
            raise datamod.DatasetError(f"{args.data} holds no test split")
        if test_ds.dims != model.cfg.dims or test_ds.T != model.cfg.T:
            raise datamod.DimensionMismatchError(
                f"checkpoint expects T={model.cfg.T} dims={model.cfg.dims}, data has T={test_ds.T} dims={test_ds.dims}"
            )
        report = evaluate_conditions(model, test_ds)
        write_report_json(report, os.path.join(args.out, "report.json"))
        write_report_csv({"limssr": report}, os.path.join(args.out, "report.csv"))
        outputs = {"report": "report.json"}
        if args.plot:
            paths = write_scatter_plots(report, os.path.join(args.out, "plots"))
            outputs["plots"] = [os.path.relpath(p, args.out) for p in paths]
        print(format_table({"limssr": report}))
        return outputs

    _guarded(args.out, "eval", argv, cfg, body)
    return 0


def summarize(results):
    """Per-row incomplete/full rho by seed plus seed-level Fisher averages."""
    summary = {}
    for row, by_seed in results.items():
        seeds = sorted(by_seed)
        avg = [by_seed[s].incomplete_average["rho"] for s in seeds]
        full = [by_seed[s].full["rho"] for s in seeds]
        summary[row] = {
            "seeds": seeds,
            "incomplete_rho": dict(zip(map(str, seeds), avg)),
            "full_rho": dict(zip(map(str, seeds), full)),
            "incomplete_rho_fisher": fisher_average(avg),
            "full_rho_fisher": fisher_average(full),
            "incomplete_mse_mean": float(np.mean([by_seed[s].incomplete_average["mse"] for s in seeds])),
        }
    return summary


def seed_averaged_reports(results):
    """One report per row, Fisher-averaging rho and arithmetically averaging mse over seeds."""
    out = {}
    for row, by_seed in results.items():
        reps = list(by_seed.values())
        rows = {
            c: {
                "rho": fisher_average([r.rows[c]["rho"] for r in reps]),
                "mse": float(np.mean([r.rows[c]["mse"] for r in reps])),
            }
            for c in CONDITIONS
        }
        avg = {
            "rho": fisher_average([r.incomplete_average["rho"] for r in reps]),
            "mse": float(np.mean([r.incomplete_average["mse"] for r in reps])),
        }
        out[row] = ConditionReport(rows, avg)
    return out


def cmd_ablate(args, cfg, argv):
    from .experiment import run

    seeds = [int(s) for s in args.seeds.split(",") if s]
    rows = args.rows.split(",") if args.rows else None
    if rows:
        bad = set(rows) - set(SUITES[args.suite])
        if bad:
            raise UsageError(f"ablate: suite {args.suite!r} has no rows {sorted(bad)}")

    def body():
        from .training import suite_rows

        train_ds, test_ds = _data(cfg, args.data)
        if train_ds is None or test_ds is None:
            raise datamod.DatasetError("ablate needs both train and test splits")
        mc = cfg.model(dims=train_ds.dims, T=train_ds.T)
        results = {}
        for name, m, t in suite_rows(args.suite, mc, cfg.train()):
            if rows and name not in rows:
                continue
            results[name] = {}
            for seed in seeds:
                res = run(m, replace(t, seed=seed), train_ds, test_ds)
                write_report_json(res.report, os.path.join(args.out, f"{name}_seed{seed}.json"), with_predictions=False)
                results[name][seed] = res.report
                print(f"{name} seed {seed}: incomplete rho {res.report.incomplete_average['rho']:.4f} "
                      f"full rho {res.report.full['rho']:.4f} ({res.seconds:.0f}s)", flush=True)
        summary = summarize(results)
        with open(os.path.join(args.out, "summary.json"), "w") as fh:
            json.dump({"suite": args.suite, "rows": summary}, fh, indent=2, sort_keys=True)
        averaged = seed_averaged_reports(results)
        write_report_csv(averaged, os.path.join(args.out, "table.csv"))
        print(format_table(averaged))
        return {"summary": "summary.json", "table": "table.csv"}

    _guarded(args.out, "ablate", argv, cfg, body)
    return 0


def cmd_grad_check(args, cfg, argv):
    from .experiment import toy_gradient_check

    t0 = time.time()
    worst, details, n = toy_gradient_check(args.seed, return_details=True)
    secs = time.time() - t0
    print(f"max_rel_error={worst:.3e} entries={n} seconds={secs:.1f} tolerance=1e-04")
    if args.verbose:
        for name, err in details.items():
            print(f"  {name}: {err:.3e}")
    return 0 if worst < 1e-4 else 1


def cmd_report(args, cfg, argv):
    reports = {}
    for path in args.inputs:
        with open(path) as fh:
            doc = json.load(fh)
        if "rows" in doc and "suite" in doc:
            print(f"suite {doc['suite']}")
            for row, s in doc["rows"].items():
                per = " ".join(f"{k}:{v:.4f}" for k, v in s["incomplete_rho"].items())
                print(f"  {row:<18} incomplete rho (fisher over seeds) {s['incomplete_rho_fisher']:.4f}  [{per}]")
            continue
        name = os.path.splitext(os.path.basename(path))[0]
        if name in reports:
            name = path
        reports[name] = read_report_json(path)
    if reports:
        print(format_table(reports))
        if args.csv:
            write_report_csv(reports, args.csv)
    return 0


# ---------------------------------------------------------------------------
# parser
# ---------------------------------------------------------------------------


def build_parser():
    p = _Parser(prog="limssr", description=__doc__.split("\n")[0])
    p.add_argument("--version", action="version", version=f"limssr {__version__}")
    sub = p.add_subparsers(dest="command", parser_class=_Parser)

    def common(sp):
        sp.add_argument("--config", help="flat key = value config file")
        sp.add_argument("-v", "--verbose", action="store_true")

    sp = sub.add_parser("gen-data", help="write a synthetic train/test dataset")
    common(sp)
    sp.add_argument("--out", required=True)
    sp.set_defaults(func=cmd_gen_data)

    sp = sub.add_parser("train", help="train, checkpoint, and evaluate if a test split exists")
    common(sp)
    sp.add_argument("--data", help="gen-data directory (default: generate from config)")
    sp.add_argument("--out", required=True)
    sp.set_defaults(func=cmd_train)

    sp = sub.add_parser("eval", help="evaluate a checkpoint under all seven conditions")
    common(sp)
    sp.add_argument("--checkpoint", required=True)
    sp.add_argument("--data", help="gen-data directory or a single dataset directory")
    sp.add_argument("--out", required=True)
    sp.add_argument("--plot", action="store_true", help="also write SVG scatter plots")
    sp.set_defaults(func=cmd_eval)

    sp = sub.add_parser("ablate", help="run an ablation suite over shared seeds")
    common(sp)
    sp.add_argument("--suite", required=True, choices=sorted(SUITES))
    sp.add_argument("--seeds", default="1,2,3")
    sp.add_argument("--rows", help="comma-separated subset of the suite's rows")
    sp.add_argument("--data")
    sp.add_argument("--out", required=True)
    sp.set_defaults(func=cmd_ablate)

    sp = sub.add_parser("grad-check", help="finite-difference check of every trainable gradient")
    common(sp)
    sp.add_argument("--seed", type=int, default=1)
    sp.set_defaults(func=cmd_grad_check)

    sp = sub.add_parser("report", help="render stored report / summary JSON as tables")
    common(sp)
    sp.add_argument("inputs", nargs="+")
    sp.add_argument("--csv", help="also write the combined table as CSV")
    sp.set_defaults(func=cmd_report)
    return p


def _error_line(kind, exc):
    msg = " ".join(str(exc).split())
    return f"error: {kind}: {msg}"


def main(argv=None):
    argv = sys.argv[1:] if argv is None else list(argv)
    parser = build_parser()
    try:
        args, extra = parser.parse_known_args(argv)
        if args.command is None:
            raise UsageError("limssr: a subcommand is required (gen-data, train, eval, ablate, grad-check, report)")
        cfg = cfgmod.resolve(args.config, cfgmod.split_overrides(extra))
    except (UsageError, cfgmod.ConfigError) as exc:
        print(_error_line("usage", exc), file=sys.stderr)
        return 2
    logging.basicConfig(level=logging.INFO if args.verbose else logging.WARNING, format="%(message)s")
    try:
        return args.func(args, cfg, argv)
    except UsageError as exc:
        print(_error_line("usage", exc), file=sys.stderr)
        return 2
    except KeyboardInterrupt:
        print("error: interrupted", file=sys.stderr)
        return 1
    except Exception as exc:  # noqa: BLE001 - top-level reporter
        print(_error_line(type(exc).__name__, exc), file=sys.stderr)
        return 1


if __name__ == "__main__":
    sys.exit(main())
