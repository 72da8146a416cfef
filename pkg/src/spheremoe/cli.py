"""Command-line entry point: corpus generation, training, metrics and ablations.

Exit codes: 0 success, 2 configuration error, 3 runtime or numerical error,
4 failed verification (``analyze jacobian`` / ``analyze span``).
"""

from __future__ import annotations

import argparse
import csv
import hashlib
import json
import os
import platform
import sys
from pathlib import Path

import numpy as np

from . import __version__
from . import tensor as tn
from .analysis import (
    export_embeddings,
    ic_series,
    model_rc,
    rf_series,
    span_residual,
    verify_jacobian,
)
from .config import PRESETS, ConfigError, RunConfig, load_run_config
from .data import split_indices
from .model import Model
from .pipeline import ABLATION_AXES, DEFAULT_VALUES, prepare, run_ablation, run_finetune, run_pretrain
from .training import CheckpointError, DivergenceError, TrainLog, load_checkpoint, save_checkpoint, validation_loss

EXIT_OK, EXIT_CONFIG, EXIT_RUNTIME, EXIT_CHECK = 0, 2, 3, 4


# ---------------------------------------------------------------------------
# output helpers


def _dump_json(path: Path, obj) -> None:
    path.write_text(json.dumps(obj, indent=2, sort_keys=True) + "\n")


def _write_csv(path: Path, header: list[str], rows) -> None:
    with open(path, "w", newline="") as fh:
        w = csv.writer(fh, lineterminator="\n")
        w.writerow(header)
        for row in rows:
            w.writerow([repr(float(x)) if isinstance(x, (float, np.floating)) else x for x in row])


def _sha256(path) -> str:
    return hashlib.sha256(Path(path).read_bytes()).hexdigest()


PATH_ARGS = ("out", "config", "preset", "overrides", "checkpoint", "checkpoints", "logs", "resume")


def _provenance(out: Path, args, run: RunConfig, inputs: list[str] = ()) -> None:
    """Resolved config, command options and input hashes; free of paths and timestamps."""
    options = {k: v for k, v in sorted(vars(args).items()) if k not in PATH_ARGS}
    _dump_json(
        out / "run.json",
        {
            "command": options,
            "config": run.to_dict(),
            "config_digest": run.digest(),
            "seed": run.train.seed,
            "inputs": [{"name": Path(p).name, "sha256": _sha256(p)} for p in inputs],
            "versions": {"spheremoe": __version__, "numpy": np.__version__, "python": platform.python_version()},
        },
    )


def _outdir(path: str) -> Path:
    out = Path(path)
    out.mkdir(parents=True, exist_ok=True)
    return out


def _checkpoint_run(cp, fallback: RunConfig) -> RunConfig:
    """The run config stored in a checkpoint, so metrics see the same data."""
    return RunConfig.from_dict(cp.run_config) if cp.run_config else fallback


def _collect_checkpoints(paths: list[str]) -> list[str]:
    files: list[str] = []
    for p in paths:
        q = Path(p)
        if q.is_dir():
            files.extend(str(f) for f in sorted(q.glob("*.xmoe")))
        else:
            files.append(str(q))
    if not files:
        raise ConfigError("no checkpoints given")
    return files


# ---------------------------------------------------------------------------
# commands


def cmd_gen_data(args, run: RunConfig) -> int:
    out = _outdir(args.out)
    prepared = prepare(run)
    corpus = prepared.corpus
    split = np.zeros(corpus.tokens.shape[0], dtype=object)
    tr, va = split_indices(corpus.tokens.shape[0], run.data.val_fraction, run.data.seed)
    split[tr], split[va] = "train", "val"
    clusters = corpus.clusters if corpus.clusters is not None else np.full(corpus.tokens.shape[0], -1)
    T = corpus.tokens.shape[1]
    _write_csv(
        out / "corpus.csv",
        ["sequence", "cluster", "split"] + [f"tok_{i}" for i in range(T)],
        ([i, int(c), s] + row.tolist() for i, (c, s, row) in enumerate(zip(clusters, split, corpus.tokens))),
    )
    _dump_json(out / "summary.json", {"sequences": int(corpus.tokens.shape[0]), "seq_len": T,
                                      "train": int(tr.size), "val": int(va.size), "vocab_size": corpus.vocab_size})
    _provenance(out, args, run)
    return EXIT_OK


def cmd_pretrain(args, run: RunConfig) -> int:
    out = _outdir(args.out)
    prepared = prepare(run)
    resume = load_checkpoint(args.resume) if args.resume else None
    result = run_pretrain(run, prepared, resume)
    _save_run(out, result, run, prepared)
    _provenance(out, args, run, [args.resume] if args.resume else [])
    return EXIT_OK


def _save_run(out: Path, result, run: RunConfig, prepared) -> None:
    result.log.write_csv(out / "train_log.csv")
    ck = out / "checkpoints"
    ck.mkdir(exist_ok=True)
    for cp in result.checkpoints:
        save_checkpoint(ck / f"step_{cp.step:07d}.xmoe", cp)
    last = result.log.records[-1] if result.log.records else {}
    _dump_json(out / "summary.json", {
        "steps": len(result.log.records),
        "final_task_loss": last.get("task_loss"),
        "final_balance_loss": last.get("balance_loss"),
        "validation_loss": validation_loss(result.model, prepared.data, seed=run.data.seed),
        "checkpoints": [cp.step for cp in result.checkpoints],
    })


def cmd_finetune(args, run: RunConfig) -> int:
    out = _outdir(args.out)
    start = load_checkpoint(args.checkpoint)
    prepared = prepare(run)
    logs = []
    for i in range(args.runs):
        seed = run.train.seed + i
        result = run_finetune(run, prepared, start, seed, frozen=not args.unfrozen)
        sub = out if args.runs == 1 else _outdir(out / f"run_{i:02d}")
        _save_run(sub, result, run, prepared)
        logs.append(result.log)
    if args.runs > 1:
        _write_ic(out / "ic.csv", logs, run.analysis.ic_window)
    _provenance(out, args, run, [args.checkpoint])
    return EXIT_OK


def _write_ic(path: Path, logs: list[TrainLog], window: int) -> list:
    reports = ic_series(logs, window)
    _write_csv(path, ["window", "start_step", "end_step", "ic", "ic_offdiag"],
               ([r.window, r.window * window + 1, (r.window + 1) * window, r.ic, r.ic_offdiag] for r in reports))
    return reports


def cmd_analyze(args, run: RunConfig) -> int:
    out = _outdir(args.out)
    kind = args.kind
    inputs: list[str] = []
    status = EXIT_OK
    if kind in ("rc", "rf"):
        files = _collect_checkpoints(args.checkpoints)
        inputs = files
        cps = [load_checkpoint(f) for f in files]
        cps.sort(key=lambda c: c.step)
        run = _checkpoint_run(cps[0], run)
        prepared = prepare(run)
        if kind == "rc":
            sem = args.labels or run.analysis.label_semantics
            rows = []
            for cp in cps:
                rep = model_rc(cp.model(), prepared.eval_tokens, prepared.eval_clusters, sem)
                rows.append([cp.step, rep.rc, rep.rank_sigma_b, int(rep.degenerate), sem])
            _write_csv(out / "rc.csv", ["step", "rc", "rank_sigma_b", "degenerate", "label_semantics"], rows)
            _dump_json(out / "summary.json", {"metric": "rc", "value": rows[-1][1], "step": rows[-1][0],
                                              "config_digest": cps[0].digest})
        else:
            rep = rf_series(cps, prepared.eval_tokens)
            _write_csv(out / "rf.csv", ["step_a", "step_b", "rf_ratio"], rep.step_pairs)
            half = cps[-1].step // 2
            _dump_json(out / "summary.json", {"metric": "rf_mean_second_half", "value": rep.mean(half),
                                              "config_digest": cps[0].digest})
    elif kind == "ic":
        if not args.logs or len(args.logs) < 2:
            raise ConfigError("analyze ic needs --logs with at least two training logs")
        inputs = list(args.logs)
        window = args.window or run.analysis.ic_window
        reports = _write_ic(out / "ic.csv", [TrainLog.read_csv(p) for p in args.logs], window)
        _dump_json(out / "summary.json", {"metric": "ic", "window": window, "runs": len(args.logs),
                                          "value": [r.ic for r in reports]})
    elif kind == "jacobian":
        a = run.analysis
        rep = verify_jacobian(a.jacobian_d, a.jacobian_experts, a.jacobian_trials, a.jacobian_tol,
                              seed=run.train.seed, margin=a.jacobian_margin)
        _write_csv(out / "jacobian.csv", ["trial", "margin", "max_abs_error", "passed"],
                   ([t.trial, t.margin, t.max_abs_error, int(t.passed)] for t in rep.trials))
        _dump_json(out / "summary.json", {"metric": "jacobian_max_abs_error", "value": rep.max_error,
                                          "tolerance": rep.tolerance, "resampled": rep.resampled,
                                          "passed": rep.passed})
        status = EXIT_OK if rep.passed else EXIT_CHECK
    elif kind == "span":
        if args.checkpoint:
            cp = load_checkpoint(args.checkpoint)
            inputs = [args.checkpoint]
            run = _checkpoint_run(cp, run)
            model = cp.model()
        else:
            model = Model(run.model, seed=run.train.seed)
        prepared = prepare(run)
        T = prepared.eval_tokens.shape[1]
        tokens = prepared.eval_tokens[: max(1, -(-run.analysis.span_tokens // T))]
        rep = span_residual(model, tokens, seed=run.train.seed)
        ok = rep.max_residual < run.analysis.span_tol and rep.rank <= rep.bound
        _write_csv(out / "span.csv", ["variant", "extension", "tokens", "skipped", "max_residual", "rank", "bound"],
                   [[rep.variant, int(rep.extension), rep.tokens, rep.skipped, rep.max_residual, rep.rank, rep.bound]])
        _dump_json(out / "summary.json", {"metric": "span_residual", "value": rep.max_residual, "rank": rep.rank,
                                          "bound": rep.bound, "extension": rep.extension, "passed": ok})
        status = EXIT_OK if ok else EXIT_CHECK
    elif kind == "export":
        if not args.checkpoint:
            raise ConfigError("analyze export needs --checkpoint")
        cp = load_checkpoint(args.checkpoint)
        inputs = [args.checkpoint]
        run = _checkpoint_run(cp, run)
        prepared = prepare(run)
        n = export_embeddings(cp.model(), prepared.eval_tokens, out / "embeddings.csv")
        _dump_json(out / "summary.json", {"rows": n, "step": cp.step, "config_digest": cp.digest})
    _provenance(out, args, run, inputs)
    return status


def cmd_ablate(args, run: RunConfig) -> int:
    out = _outdir(args.out)
    values = args.values.split(";") if args.axis == "components" and args.values else (
        args.values.split(",") if args.values else DEFAULT_VALUES[args.axis])
    rows = run_ablation(args.axis, values, run, finetune_steps=args.finetune_steps)
    _write_csv(out / "comparison.csv", ["axis", "value", "final_task_loss", "final_rc", "mean_rf"],
               ([r["axis"], r["value"], r["final_task_loss"], r["final_rc"], r["mean_rf"]] for r in rows))
    _provenance(out, args, run)
    return EXIT_OK


# ---------------------------------------------------------------------------
# argument parsing


def build_parser() -> argparse.ArgumentParser:
    common = argparse.ArgumentParser(add_help=False)
    common.add_argument("--config", help="INI run config ([model] [router] [train] [data] [source] [analysis])")
    common.add_argument("--preset", default="desk", choices=sorted(PRESETS), help="base values before the config file")
    common.add_argument("--set", dest="overrides", action="append", default=[], metavar="SECTION.KEY=VALUE",
                        help="override one config value; repeatable, applied last")
    common.add_argument("--out", required=True, help="output directory")

    p = argparse.ArgumentParser(prog="spheremoe", description=__doc__.splitlines()[0])
    p.add_argument("--version", action="version", version=__version__)
    sub = p.add_subparsers(dest="command", required=True)

    sub.add_parser("gen-data", parents=[common], help="write the corpus and its split")

    sp = sub.add_parser("pretrain", parents=[common], help="masked-LM pretraining with checkpoints")
    sp.add_argument("--resume", help="checkpoint to resume from")

    sp = sub.add_parser("finetune", parents=[common], help="fine-tune from a checkpoint with the SMoE layer frozen")
    sp.add_argument("--checkpoint", required=True)
    sp.add_argument("--runs", type=int, default=1, help="number of runs with consecutive seeds (IC needs >= 2)")
    sp.add_argument("--unfrozen", action="store_true", help="train router and experts as well")

    sp = sub.add_parser("analyze", parents=[common], help="compute a metric")
    sp.add_argument("kind", choices=["rc", "rf", "ic", "jacobian", "span", "export"])
    sp.add_argument("--checkpoints", nargs="+", default=[], help="checkpoint files or directories (rc, rf)")
    sp.add_argument("--checkpoint", help="single checkpoint (span, export)")
    sp.add_argument("--logs", nargs="+", help="training logs of the runs to compare (ic)")
    sp.add_argument("--window", type=int, help="steps per IC window")
    sp.add_argument("--labels", choices=["assigned_expert", "latent_cluster"], help="RC class labels")

    sp = sub.add_parser("ablate", parents=[common], help="train and evaluate once per sweep value")
    sp.add_argument("axis", choices=ABLATION_AXES)
    sp.add_argument("--values", help="comma-separated values (components: 'on,off,on;off,on,on')")
    sp.add_argument("--finetune-steps", type=int, default=200, help="fine-tune length for the components axis")
    return p


COMMANDS = {"gen-data": cmd_gen_data, "pretrain": cmd_pretrain, "finetune": cmd_finetune,
            "analyze": cmd_analyze, "ablate": cmd_ablate}


def _fail(kind: str, exc: BaseException, code: int) -> int:
    print(json.dumps({"error": kind, "type": type(exc).__name__, "message": str(exc)}), file=sys.stderr)
    return code


def main(argv: list[str] | None = None) -> int:
    args = build_parser().parse_args(argv)
    try:
        run = load_run_config(args.config, args.preset, args.overrides, env=os.environ)
    except ConfigError as exc:
        return _fail("config", exc, EXIT_CONFIG)
    if getattr(args, "runs", 1) < 1:
        return _fail("config", ConfigError("--runs must be >= 1"), EXIT_CONFIG)
    try:
        return COMMANDS[args.command](args, run)
    except ConfigError as exc:
        return _fail("config", exc, EXIT_CONFIG)
    except (DivergenceError, tn.NonFiniteError) as exc:
        return _fail("numerical", exc, EXIT_RUNTIME)
    except (CheckpointError, OSError, ValueError, KeyError, IndexError, RuntimeError) as exc:
        return _fail("runtime", exc, EXIT_RUNTIME)


if __name__ == "__main__":
    sys.exit(main())
