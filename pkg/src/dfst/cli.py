"""Command-line entry point: ``dfst <subcommand> ...``.

Exit codes: 0 success, 1 usage error, 2 runtime error, 3 divergence found
by ``verify``.  Errors go to stderr as ``dfst-error: <kind>: <message>``.
"""

from __future__ import annotations

import argparse
import os
import sys
from pathlib import Path

import numpy as np

from . import evaluate, pto_data
from .dfst_model import load_checkpoint, save_checkpoint
from .errors import DfstError
from .fst_core import ExpertTask, compile_fst, expert_spec, read_fst, save_fst, verify_emulation
from .io_utils import atomic_write_text
from .parallel import set_workers
from .train import LossLog, load_config, train_loop

EXIT_OK, EXIT_USAGE, EXIT_RUNTIME, EXIT_DIVERGENCE = 0, 1, 2, 3
OUT_DIR_ENV = "DFST_OUT_DIR"

# data-selection settings (p, q, N) used for the reference experiments
PAPER_DS = {
    "add2": (1, 3, 20),
    "add10": (1, 3, 225),
    "mult2": (1, 5, 750),
    "mult10": (1, 5, 10000),
}


class UsageError(Exception):
    pass


class _Parser(argparse.ArgumentParser):
    def error(self, message):
        raise UsageError(f"{self.prog}: {message}")


def _default_out(name: str) -> Path:
    return Path(os.environ.get(OUT_DIR_ENV, ".")) / name


def _positive(text: str) -> int:
    v = int(text)
    if v < 1:
        raise argparse.ArgumentTypeError(f"expected a positive integer, got {text}")
    return v


def build_parser() -> argparse.ArgumentParser:
    p = _Parser(prog="dfst", description=__doc__.splitlines()[0], allow_abbrev=False)
    p.add_argument("--threads", type=_positive, default=os.cpu_count() or 1,
                   help="maximum worker processes for parallel stages (default: all cores)")
    sub = p.add_subparsers(dest="command", required=True, parser_class=_Parser)
    tasks = [t.name for t in ExpertTask]

    g = sub.add_parser("gen-data", help="sample a PTO dataset from an expert", allow_abbrev=False)
    g.add_argument("--task", choices=tasks, required=True)
    g.add_argument("--p", type=_positive, help="exhaustive stratum: operands with at most p digits")
    g.add_argument("--q", type=_positive, help="same-digit and random strata: up to q digits")
    g.add_argument("--n", type=_positive, help="total number of records N")
    g.add_argument("--seed", type=int, default=0, help="seed for the random stratum")
    g.add_argument("--out", type=Path, help=f"output file (default: ${OUT_DIR_ENV}/<task>.pto)")

    t = sub.add_parser("train", help="train a DFST from a key = value config", allow_abbrev=False)
    t.add_argument("--config", type=Path, required=True, help="config file (see configs/*.paper, *.smoke)")
    t.add_argument("--out-dir", type=Path, help="overrides out_dir from the config")
    t.add_argument("--iters", type=_positive, help="overrides total_iters from the config")
    t.add_argument("--seed", type=int, help="overrides seed from the config")
    t.add_argument("--quiet", action="store_true", help="no progress lines")

    e = sub.add_parser("eval", help="PLG/RLG search for a checkpoint", allow_abbrev=False)
    e.add_argument("--checkpoint", type=Path, required=True)
    e.add_argument("--task", choices=tasks, required=True)
    e.add_argument("--m-max", type=_positive, required=True, help="largest digit count probed")
    e.add_argument("--step", type=_positive, default=1, help="grid spacing for the linear schedule")
    e.add_argument("--seed", type=int, default=0, help="seed for random probe pairs")
    e.add_argument("--halt-mode", choices=["oracle", "fixpoint"], default="oracle")
    e.add_argument("--schedule", choices=["linear", "geometric"], default="linear")
    e.add_argument("--refine", action="store_true", help="binary-search the failure boundary")
    e.add_argument("--step-budget", type=_positive, default=evaluate.DEFAULT_STEP_BUDGET)
    e.add_argument("--out", type=Path, help="report path (default: stdout); probes go to <out>.probes.csv")

    c = sub.add_parser("compile", help="one-hot compile a transition table into a checkpoint", allow_abbrev=False)
    src = c.add_mutually_exclusive_group(required=True)
    src.add_argument("--fst", type=Path, help="textual transition table")
    src.add_argument("--expert", choices=tasks, help="use a built-in expert table")
    c.add_argument("--out", type=Path, required=True, help="checkpoint path")
    c.add_argument("--dump-fst", type=Path, help="also write the table in textual form")

    v = sub.add_parser("verify", help="compare a table against a DFST on random inputs", allow_abbrev=False)
    vsrc = v.add_mutually_exclusive_group(required=True)
    vsrc.add_argument("--fst", type=Path, help="textual transition table")
    vsrc.add_argument("--expert", choices=tasks, help="use a built-in expert table")
    v.add_argument("--params", type=Path, required=True, help="checkpoint to test")
    v.add_argument("--n-random", type=_positive, default=250)
    v.add_argument("--max-digits", type=_positive, default=100)
    v.add_argument("--max-steps", type=_positive, default=10**7)
    v.add_argument("--seed", type=int, default=0)

    r = sub.add_parser("report", help="generalization curve for a training run", allow_abbrev=False)
    r.add_argument("--run-dir", type=Path, required=True, help="directory written by `train`")
    r.add_argument("--out", type=Path, help="CSV path (default: <run-dir>/curve.csv)")
    r.add_argument("--task", choices=tasks, help="defaults to the task recorded in the checkpoints")
    r.add_argument("--m-max", type=_positive, default=30)
    r.add_argument("--step", type=_positive, default=1)
    r.add_argument("--seed", type=int, default=0)
    return p


def _cmd_gen_data(args) -> int:
    p, q, n = PAPER_DS[args.task]
    p = args.p or p
    q = args.q or q
    n = args.n or n
    task = ExpertTask.parse(args.task)
    ds = pto_data.ds_sample(task.radix, task, p, q, n, args.seed)
    out = args.out or _default_out(f"{task.name}.pto")
    pto_data.save_dataset(ds, out)
    print(f"wrote {len(ds.records)} records to {out} (manifest {ds.manifest}, longest trajectory {ds.max_len})")
    return EXIT_OK


def _cmd_train(args) -> int:
    cfg = load_config(args.config)
    if args.out_dir:
        cfg.out_dir = str(args.out_dir)
    if args.iters:
        cfg.total_iters = args.iters
        cfg.checkpoint_every = min(cfg.checkpoint_every, args.iters)
    if args.seed is not None:
        cfg.seed = args.seed
    if cfg.dataset_path:
        ds = pto_data.load_dataset(cfg.dataset_path)
    else:
        p, q, n = PAPER_DS[cfg.task]
        ds = pto_data.ds_sample(cfg.radix, cfg.task, p, q, n, cfg.seed)
        pto_data.save_dataset(ds, Path(cfg.out_dir) / "dataset.pto")
    every = max(1, cfg.total_iters // 100)

    def progress(it, loss, lr):
        if not args.quiet and (it % every == 0 or it + 1 == cfg.total_iters):
            print(f"iter {it} loss {loss:.6g} lr {lr:.6g}", flush=True)

    result = train_loop(cfg, ds, progress)
    print(f"wrote {len(result.checkpoints)} checkpoints and loss.csv to {cfg.out_dir}")
    return EXIT_OK


def _cmd_eval(args) -> int:
    params, _ = load_checkpoint(args.checkpoint)
    report = evaluate.lg_search(params, args.task, args.m_max, args.step, args.seed, args.halt_mode,
                                args.schedule, args.refine, args.step_budget, str(args.checkpoint))
    if args.out:
        evaluate.write_report(report, args.out)
        atomic_write_text(Path(str(args.out) + ".probes.csv"), report.probes_csv())
        print(f"plg={report.plg} rlg={report.rlg} -> {args.out}")
    else:
        sys.stdout.write(report.to_text())
    return EXIT_OK


def _load_spec(args):
    return expert_spec(args.expert) if args.expert else read_fst(args.fst)


def _cmd_compile(args) -> int:
    spec = _load_spec(args)
    params = compile_fst(spec)
    meta = {"source": args.expert or str(args.fst), "compiled": True, "n_states": spec.n_states}
    save_checkpoint(params, args.out, meta)
    if args.dump_fst:
        save_fst(spec, args.dump_fst)
    print(f"compiled {spec.n_states} states into {args.out}")
    return EXIT_OK


def _cmd_verify(args) -> int:
    spec = _load_spec(args)
    params, _ = load_checkpoint(args.params)
    radix = spec.alphabet.radix
    rng = np.random.default_rng(args.seed)
    inputs = [
        tuple("".join(str(v) for v in rng.integers(0, radix, size=int(rng.integers(1, args.max_digits + 1))))
              for _ in range(2))
        for _ in range(args.n_random)
    ]
    rep = verify_emulation(spec, params, inputs, args.max_steps)
    print(f"n_inputs={rep.n_inputs} n_exact={rep.n_exact}")
    if rep.first_divergence is not None:
        pair, t, expected, got = rep.first_divergence
        print(f"first divergence: input={pair} step={t} expert={expected} model={got}")
        return EXIT_DIVERGENCE
    return EXIT_OK


def _cmd_report(args) -> int:
    run_dir = args.run_dir
    ckpts = sorted(run_dir.glob("ckpt_*.dfst"))
    if not ckpts:
        raise FileNotFoundError(f"no checkpoints in {run_dir}")
    task = args.task
    if task is None:
        _, meta = load_checkpoint(ckpts[0])
        task = meta.get("task")
        if task is None:
            raise UsageError("checkpoints do not record a task; pass --task")
    log_path = run_dir / "loss.csv"
    log = LossLog.from_csv(log_path.read_text()) if log_path.exists() else None
    csv_text = evaluate.generalization_curve(ckpts, task, args.m_max, args.step, args.seed, log)
    out = args.out or run_dir / "curve.csv"
    atomic_write_text(out, csv_text)
    print(f"wrote {out}")
    return EXIT_OK


COMMANDS = {
    "gen-data": _cmd_gen_data,
    "train": _cmd_train,
    "eval": _cmd_eval,
    "compile": _cmd_compile,
    "verify": _cmd_verify,
    "report": _cmd_report,
}


def run_cli(argv=None) -> int:
    parser = build_parser()
    try:
        args = parser.parse_args(argv)
        set_workers(args.threads)
        return COMMANDS[args.command](args)
    except UsageError as exc:
        print(f"dfst-error: usage: {exc}", file=sys.stderr)
        return EXIT_USAGE
    except SystemExit as exc:  # --help
        return EXIT_OK if exc.code in (0, None) else EXIT_USAGE
    except DfstError as exc:
        print(f"dfst-error: {exc.kind}: {exc}", file=sys.stderr)
        return EXIT_RUNTIME
    except (OSError, ValueError, KeyError) as exc:
        print(f"dfst-error: runtime: {exc}", file=sys.stderr)
        return EXIT_RUNTIME


def main() -> None:
    sys.exit(run_cli())


if __name__ == "__main__":
    main()
