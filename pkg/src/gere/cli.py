"""Command-line pipeline: synth-data, pretrain, distill, train, eval, landscape, report.

Every command writes ``run_manifest.json`` into its ``--out`` directory, on
success and on failure. Errors are reported as one JSON line on stderr.
"""

from __future__ import annotations

import argparse
import csv
import dataclasses
import hashlib
import io
import json
import logging
import platform
import sys
import time
from pathlib import Path

import numpy as np

from . import __version__
from .distill import (
    ReplayPool,
    archive_states,
    compute_stats,
    distill,
    load_archive,
    load_thresholds,
    save_archive,
    save_packed_states,
    save_thresholds,
    thresholds,
)
from .harness import (
    METHODS,
    Metrics,
    ReplayAssets,
    TrainConfig,
    evaluate_general,
    evaluate_tasks,
    pretrain_lm,
    run_continual,
    run_mtl,
)
from .landscape import METRICS, GridSpec, basis_frame, eval_grid, grid_to_csv
from .model import LoraConfig, ModelConfig, init_model, load_checkpoint, save_checkpoint
from .scheduler import parse_ratio
from .synth import (
    ByteTokenizer,
    gen_general_corpus,
    gen_tasks,
    load_jsonl_replay,
    read_general_split,
    read_tasks,
    read_token_jsonl,
    write_bundle,
    write_token_jsonl,
)

log = logging.getLogger("gere")

MANIFEST = "run_manifest.json"
REPORT_FIELDS = ["method", "run", "mode", "general", "ap", "f1", "orig_general", "config_hash"]


class CliError(Exception):
    def __init__(self, message: str, kind: str = "error", code: int = 1):
        super().__init__(message)
        self.kind = kind
        self.code = code


class _Parser(argparse.ArgumentParser):
    def error(self, message):
        raise CliError(message, kind="usage", code=2)


def file_hash(path) -> str:
    h = hashlib.sha256()
    with open(path, "rb") as fh:
        for chunk in iter(lambda: fh.read(1 << 20), b""):
            h.update(chunk)
    return h.hexdigest()[:16]


def _require(path, what: str) -> Path:
    p = Path(path)
    if not p.exists():
        raise CliError(f"{what} not found: {p}", kind="missing_input")
    return p


# ------------------------------------------------------------- commands


def cmd_synth_data(args, ctx: dict) -> None:
    corpus = gen_general_corpus(
        args.seed, pretrain=args.pretrain_size, replay_pool=args.pool_size, heldout=args.heldout_size, length=args.length
    )
    tasks = gen_tasks(args.seed, k=args.n_tasks, train_size=args.train_size, test_size=args.test_size)
    manifest = write_bundle(args.out, corpus, tasks)
    ctx["outputs"]["data_manifest"] = manifest


def _data_root(path) -> Path:
    root = _require(path, "data directory")
    if not (root / "general").is_dir():
        raise CliError(f"{root} has no general/ corpus (run synth-data first)", kind="missing_input")
    return root


def cmd_pretrain(args, ctx: dict) -> None:
    root = _data_root(args.data)
    sequences = read_general_split(root, "pretrain")
    heldout = read_general_split(root, "heldout")
    model = init_model(ModelConfig(seed=args.seed))
    losses = pretrain_lm(model, sequences, epochs=args.epochs, lr=args.lr, batch_size=args.batch, seed=args.seed)
    save_checkpoint(model, args.out / "base.ckpt")
    ctx["outputs"].update(
        checkpoint="base.ckpt",
        fingerprint=model.fingerprint(),
        final_loss=losses[-1],
        general=100.0 * evaluate_general(model, heldout),
    )


def _load_pool(args, root: Path | None, model_max_seq: int) -> ReplayPool:
    if getattr(args, "replay_jsonl", None):
        path = _require(args.replay_jsonl, "replay JSONL")
        return load_jsonl_replay(path, ByteTokenizer(), max_len=model_max_seq)
    if root is None:
        raise CliError("no replay pool source given", kind="missing_input")
    return ReplayPool(read_token_jsonl(root / "general" / "replay_pool.jsonl"))


def cmd_distill(args, ctx: dict) -> None:
    model = load_checkpoint(_require(args.model, "checkpoint"))
    root = _data_root(args.data) if args.data else None
    pool = _load_pool(args, root, model.config.max_seq)
    archive = distill(model, pool)
    thr = thresholds(compute_stats(archive))
    save_archive(archive, args.out / "archive.bin")
    save_thresholds(thr, args.out / "thresholds.json")
    save_packed_states(archive_states(archive, thr), args.out / "states.bin")
    # keep the exact pool next to its targets so training replays the same samples
    write_token_jsonl(args.out / "replay_pool.jsonl", pool.sequences)
    ctx["outputs"].update(
        archive="archive.bin",
        thresholds="thresholds.json",
        states="states.bin",
        fingerprint=archive.fingerprint,
        n_samples=len(archive),
    )


def _train_config(args) -> TrainConfig:
    """Config file (if any) first, explicit flags on top."""
    d = json.loads(_require(args.config, "config file").read_text()) if args.config else {}
    flags = {
        "method": args.method,
        "weight": args.weight,
        "bi": None if args.bi is None else parse_ratio(args.bi),
        "lr": args.lr,
        "epochs": args.epochs,
        "batch_size": args.batch,
        "lora": None if args.lora is None else dataclasses.asdict(LoraConfig.parse(args.lora)),
        "seed": args.seed,
        "ce_scope": args.ce_scope,
    }
    d.update({k: v for k, v in flags.items() if v is not None})
    return TrainConfig.from_dict(d)


def _replay_assets(args, cfg: TrainConfig, model, root: Path) -> ReplayAssets | None:
    if not cfg.uses_replay:
        if args.replay_archive or args.thresholds:
            log.warning("method %s does not replay; ignoring --replay-archive/--thresholds", cfg.method)
        return None
    pool = None
    if args.replay_archive:
        side = Path(args.replay_archive).parent / "replay_pool.jsonl"
        if side.exists():
            pool = ReplayPool(read_token_jsonl(side))
    if pool is None:
        pool = _load_pool(args, root, model.config.max_seq)
    if cfg.aux_kind is None:
        return ReplayAssets(pool)
    if not args.replay_archive:
        raise CliError(f"method {cfg.method} needs --replay-archive", kind="missing_input")
    try:
        archive = load_archive(_require(args.replay_archive, "replay archive"), expected_fingerprint=model.fingerprint())
    except ValueError as exc:
        if "fingerprint" in str(exc):
            raise CliError(str(exc), kind="fingerprint_mismatch") from exc
        raise
    thr = None
    if cfg.aux_kind == "tm":
        if not args.thresholds:
            raise CliError("method baseline_r_tm needs --thresholds", kind="missing_input")
        thr = load_thresholds(_require(args.thresholds, "thresholds file"))
    return ReplayAssets(pool, archive, thr, model.params["lm_head.weight"].data.copy())


def cmd_train(args, ctx: dict) -> None:
    cfg = _train_config(args)
    root = _data_root(args.tasks)
    model = load_checkpoint(_require(args.model, "checkpoint"))
    tasks = read_tasks(root)
    heldout = read_token_jsonl(root / "general" / "heldout.jsonl")
    assets = _replay_assets(args, cfg, model, root)
    ctx["config"] = cfg.to_dict()
    runner = run_mtl if args.mtl else run_continual
    record = runner(model, tasks, cfg, assets, heldout, out_dir=args.out, save_checkpoints=args.save_checkpoints)
    save_checkpoint(record.final_model, args.out / "final.ckpt")
    ctx["outputs"].update(final=record.final, checkpoint="final.ckpt", config_hash=record.config_hash)


def cmd_eval(args, ctx: dict) -> None:
    root = _data_root(args.tasks)
    model = load_checkpoint(_require(args.model, "checkpoint"))
    tasks = read_tasks(root)
    if args.eval_jsonl:
        # external general-text benchmark in place of the synthetic held-out split
        heldout = load_jsonl_replay(_require(args.eval_jsonl, "eval JSONL"), ByteTokenizer(), max_len=model.config.max_seq).sequences
    else:
        heldout = read_token_jsonl(root / "general" / "heldout.jsonl")
    accs, ap = evaluate_tasks(model, tasks)
    m = Metrics.of(evaluate_general(model, heldout), ap)
    result = {
        "general": m.general,
        "ap": m.ap,
        "f1": m.f1,
        "task_acc": {k: 100.0 * v for k, v in accs.items()},
        "fingerprint": model.fingerprint(),
    }
    (args.out / "metrics.json").write_text(json.dumps(result, indent=2, sort_keys=True) + "\n")
    ctx["outputs"].update(result)


def _range(text: str) -> tuple[float, float]:
    try:
        lo, hi = (float(x) for x in text.split(","))
    except ValueError:
        raise CliError(f"bad range {text!r}; expected lo,hi", kind="usage", code=2) from None
    return lo, hi


def cmd_landscape(args, ctx: dict) -> None:
    base = load_checkpoint(_require(args.base, "base checkpoint"))
    mx = load_checkpoint(_require(args.model_x, "x checkpoint"))
    my = load_checkpoint(_require(args.model_y, "y checkpoint"))
    spec = GridSpec(_range(args.x_range), _range(args.y_range), args.nx, args.ny, args.metric)
    root = _data_root(args.data)
    pool = ReplayPool(read_token_jsonl(root / "general" / "replay_pool.jsonl"))
    heldout = read_token_jsonl(root / "general" / "heldout.jsonl")
    frame = basis_frame(base, mx, my)
    rows = eval_grid(frame, spec, pool=pool, heldout=heldout)
    (args.out / "landscape.csv").write_text(grid_to_csv(rows))
    ctx["outputs"].update(grid="landscape.csv", points=len(rows), metric=args.metric)


def _run_dirs(paths) -> list[Path]:
    found = []
    for p in paths:
        p = _require(p, "run directory")
        if (p / "run.json").exists():
            found.append(p)
        else:
            found.extend(sorted(d for d in p.iterdir() if (d / "run.json").exists()))
    if not found:
        raise CliError("no run directories (with run.json) found", kind="missing_input")
    return found


def report_rows(run_dirs) -> list[dict]:
    rows = []
    for d in run_dirs:
        meta = json.loads((d / "run.json").read_text())
        lines = (d / "record.jsonl").read_text().splitlines()
        final = json.loads(lines[-1])
        method = meta["config"]["method"] + ("_mtl" if meta["mode"] == "mtl" else "")
        rows.append(
            {
                "method": method,
                "run": d.name,
                "mode": meta["mode"],
                "general": "%.4f" % final["general"],
                "ap": "%.4f" % final["ap"],
                "f1": "%.4f" % final["f1"],
                "orig_general": "%.4f" % meta["orig_general"],
                "config_hash": meta["config_hash"],
            }
        )
    return rows


def report_csv(rows) -> str:
    buf = io.StringIO()
    w = csv.DictWriter(buf, fieldnames=REPORT_FIELDS, lineterminator="\n")
    w.writeheader()
    w.writerows(rows)
    return buf.getvalue()


def cmd_report(args, ctx: dict) -> None:
    rows = report_rows(_run_dirs(args.runs))
    (args.out / "report.csv").write_text(report_csv(rows))
    ctx["outputs"].update(report="report.csv", rows=len(rows))


# ---------------------------------------------------------------- parser


def build_parser() -> argparse.ArgumentParser:
    p = _Parser(prog="gere", description=__doc__.splitlines()[0])
    p.add_argument("--version", action="version", version=__version__)
    p.add_argument("-v", "--verbose", action="store_true")
    sub = p.add_subparsers(dest="command", required=True, parser_class=_Parser)

    s = sub.add_parser("synth-data", help="generate the general corpus and the task suite")
    s.add_argument("--seed", type=int, default=0)
    s.add_argument("--n-tasks", type=int, default=4)
    s.add_argument("--length", type=int, default=32, help="general sequence length")
    s.add_argument("--pretrain-size", type=int, default=4000)
    s.add_argument("--pool-size", type=int, default=1000)
    s.add_argument("--heldout-size", type=int, default=300)
    s.add_argument("--train-size", type=int, default=2000)
    s.add_argument("--test-size", type=int, default=500)
    s.add_argument("--out", type=Path, required=True)
    s.set_defaults(func=cmd_synth_data)

    s = sub.add_parser("pretrain", help="train the base model on the general corpus")
    s.add_argument("--data", type=Path, required=True)
    s.add_argument("--seed", type=int, default=0)
    s.add_argument("--epochs", type=int, default=8)
    s.add_argument("--lr", type=float, default=3e-3)
    s.add_argument("--batch", type=int, default=64)
    s.add_argument("--out", type=Path, required=True)
    s.set_defaults(func=cmd_pretrain)

    s = sub.add_parser("distill", help="store base hidden states, thresholds and packed states")
    s.add_argument("--model", type=Path, required=True)
    s.add_argument("--data", type=Path)
    s.add_argument("--replay-jsonl", type=Path, help='external {"text": ...} lines instead of the synthetic pool')
    s.add_argument("--seed", type=int, default=0)
    s.add_argument("--out", type=Path, required=True)
    s.set_defaults(func=cmd_distill)

    s = sub.add_parser("train", help="continual (or --mtl joint) finetuning")
    s.add_argument("--config", type=Path)
    s.add_argument("--method", choices=METHODS)
    s.add_argument("--weight", help="fixed:<w> or dynamic")
    s.add_argument("--bi", help="batch-insertion ratio, a/b or decimal")
    s.add_argument("--lr", type=float)
    s.add_argument("--epochs", type=int)
    s.add_argument("--batch", type=int)
    s.add_argument("--lora", help="r,alpha,dropout")
    s.add_argument("--seed", type=int)
    s.add_argument("--ce-scope", choices=("all", "task"))
    s.add_argument("--tasks", type=Path, required=True, help="data directory from synth-data")
    s.add_argument("--model", type=Path, required=True, help="base checkpoint")
    s.add_argument("--replay-archive", type=Path)
    s.add_argument("--thresholds", type=Path)
    s.add_argument("--mtl", action="store_true")
    s.add_argument("--save-checkpoints", action="store_true")
    s.add_argument("--out", type=Path, required=True)
    s.set_defaults(func=cmd_train)

    s = sub.add_parser("eval", help="general score, per-task accuracy, AP and F1 of a checkpoint")
    s.add_argument("--model", type=Path, required=True)
    s.add_argument("--tasks", type=Path, required=True)
    s.add_argument("--eval-jsonl", type=Path, help='general score on external {"text": ...} lines')
    s.add_argument("--out", type=Path, required=True)
    s.set_defaults(func=cmd_eval)

    s = sub.add_parser("landscape", help="metric grid over base + a*(x - base) + b*(y - base)")
    s.add_argument("--base", type=Path, required=True)
    s.add_argument("--x-model", "--model-x", dest="model_x", type=Path, required=True, help="model spanning the x axis")
    s.add_argument("--y-model", "--model-y", dest="model_y", type=Path, required=True, help="model spanning the y axis")
    s.add_argument("--data", type=Path, required=True)
    s.add_argument("--metric", choices=METRICS, default="replay_ce")
    s.add_argument("--x-range", default="-0.5,1.5")
    s.add_argument("--y-range", default="-0.5,1.5")
    s.add_argument("--nx", type=int, default=25)
    s.add_argument("--ny", type=int, default=25)
    s.add_argument("--out", type=Path, required=True)
    s.set_defaults(func=cmd_landscape)

    s = sub.add_parser("report", help="one CSV row per run directory")
    s.add_argument("runs", nargs="+", type=Path)
    s.add_argument("--out", type=Path, required=True)
    s.set_defaults(func=cmd_report)
    return p


def _guess_out(argv) -> Path | None:
    for i, a in enumerate(argv):
        if a == "--out" and i + 1 < len(argv):
            return Path(argv[i + 1])
        if a.startswith("--out="):
            return Path(a.split("=", 1)[1])
    return None


def _input_hashes(args) -> dict:
    hashes = {}
    for key in ("model", "replay_archive", "thresholds", "config", "base", "model_x", "model_y", "replay_jsonl", "eval_jsonl"):
        path = getattr(args, key, None)
        if path is not None and Path(path).is_file():
            hashes[key] = file_hash(path)
    data = getattr(args, "data", None) or getattr(args, "tasks", None)
    if data is not None and (Path(data) / "data_manifest.json").is_file():
        hashes["data_manifest"] = file_hash(Path(data) / "data_manifest.json")
    return hashes


def _write_manifest(out: Path | None, ctx: dict) -> None:
    if out is None:
        return
    try:
        out.mkdir(parents=True, exist_ok=True)
        (out / MANIFEST).write_text(json.dumps(ctx, indent=2, sort_keys=True, default=str) + "\n")
    except OSError:
        pass


def main(argv: list[str] | None = None) -> int:
    argv = list(sys.argv[1:] if argv is None else argv)
    ctx: dict = {
        "argv": argv,
        "versions": {"gere": __version__, "numpy": np.__version__, "python": platform.python_version()},
        "outputs": {},
    }
    out = _guess_out(argv)
    start = time.perf_counter()
    try:
        try:
            args = build_parser().parse_args(argv)
        except SystemExit as exc:  # --help / --version
            return int(exc.code or 0)
        logging.basicConfig(level=logging.INFO if args.verbose else logging.WARNING, format="%(levelname)s %(message)s")
        out = args.out
        out.mkdir(parents=True, exist_ok=True)
        ctx.update(command=args.command, flags={k: v for k, v in vars(args).items() if k != "func"})
        ctx["seed"] = getattr(args, "seed", None)
        ctx["input_hashes"] = _input_hashes(args)
        args.func(args, ctx)
        ctx["status"] = "ok"
        return 0
    except CliError as exc:
        ctx.update(status="error", error={"kind": exc.kind, "message": str(exc)})
        print(json.dumps({"error": exc.kind, "message": str(exc)}), file=sys.stderr)
        return exc.code
    except (ValueError, FileNotFoundError, OSError, KeyError, FloatingPointError) as exc:
        kind = "fingerprint_mismatch" if "fingerprint" in str(exc) else type(exc).__name__
        ctx.update(status="error", error={"kind": kind, "message": str(exc)})
        print(json.dumps({"error": kind, "message": str(exc)}), file=sys.stderr)
        return 1
    finally:
        ctx["wall_time"] = round(time.perf_counter() - start, 3)
        _write_manifest(out, ctx)


if __name__ == "__main__":
    sys.exit(main())
