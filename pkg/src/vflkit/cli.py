"""Command-line entry point: ``vflkit <subcommand> [flags]``.

Exit status: 0 on success, 2 on usage/contract errors, 1 on I/O errors.
Every run also writes ``<out stem>.manifest.json`` (or ``--manifest``) with the
argv, the resolved flags and their hash. A ``--config`` JSON file may set any
flag (keys are flag names with dashes or underscores); argv wins on conflict.
"""

from __future__ import annotations

import argparse
import hashlib
import json
import platform
import sys
import time
from pathlib import Path
from typing import Any, Sequence

import numpy as np

from vflkit import __version__
from vflkit import harness as H
from vflkit import model as M
from vflkit import selection as S
from vflkit import taskgen as tg
from vflkit import train as T
from vflkit.numkit import ContractError, ShapeError


def _int_list(text: str) -> list[int] | str:
    if text == "all":
        return "all"
    try:
        return [int(x) for x in text.split(",") if x.strip()]
    except ValueError:
        raise argparse.ArgumentTypeError(f"expected 'all' or comma-separated integers, got {text!r}")


def _tasks(text: str) -> list[str]:
    names = list(tg.TASKS) if text == "all" else text.split(",")
    bad = [t for t in names if t not in tg.TASKS]
    if bad:
        raise argparse.ArgumentTypeError(f"unknown task(s) {bad}; choose from {', '.join(tg.TASKS)} or all")
    return names


def build_parser() -> argparse.ArgumentParser:
    p = argparse.ArgumentParser(prog="vflkit", description=__doc__.splitlines()[0])
    p.add_argument("--version", action="version", version=f"vflkit {__version__}")
    sub = p.add_subparsers(dest="command", required=True)

    def common(sp, out_help: str, seed: int = 0):
        sp.add_argument("--seed", type=int, default=seed)
        sp.add_argument("--out", required=True, help=out_help)
        sp.add_argument("--jobs", type=int, default=1, help="worker threads for per-sample evaluation")
        sp.add_argument("--config", help="JSON file of flag defaults")
        sp.add_argument("--manifest", help="manifest path (default: <out stem>.manifest.json)")

    sp = sub.add_parser("gen-data", help="write paired probing samples as JSON lines")
    sp.add_argument("--task", type=_tasks, default=list(tg.TASKS))
    sp.add_argument("--samples", type=int, default=100, help="pairs per task")
    sp.add_argument("--flip", action="store_true", help="seeded random target/source roles")
    common(sp, "output .jsonl")

    sp = sub.add_parser("train", help="train the base model on the uniform task mix")
    sp.add_argument("--steps", type=int, default=5000)
    sp.add_argument("--batch", type=int, default=32)
    sp.add_argument("--lr", type=float, default=3e-4)
    sp.add_argument("--warmup", type=int, default=200)
    sp.add_argument("--eval-every", type=int, default=500)
    sp.add_argument("--eval-samples", type=int, default=50)
    sp.add_argument("--mismatch", type=float, default=0.5,
                    help="share of training rows whose prompt sees a different image")
    sp.add_argument("--log", help="metrics CSV (default: <out stem>.metrics.csv)")
    common(sp, "output checkpoint", seed=42)

    sp = sub.add_parser("probe-swap", help="vision token swapping change-rate sweep")
    sp.add_argument("--ckpt", required=True)
    sp.add_argument("--task", choices=tg.TASKS, required=True)
    sp.add_argument("--samples", type=int, default=200)
    sp.add_argument("--data", help="read pairs of --task from a gen-data file instead of generating")
    sp.add_argument("--layers", type=_int_list, default="all")
    sp.add_argument("--no-figure", action="store_true")
    common(sp, "report path; .json, .csv and .svg are written with its stem")

    sp = sub.add_parser("probe-drop", help="progressive vision token dropping sweep")
    sp.add_argument("--ckpt", required=True)
    sp.add_argument("--task", type=_tasks, required=True)
    sp.add_argument("--samples", type=int, default=200, help="samples per task")
    sp.add_argument("--drop-at", type=_int_list, default="all")
    sp.add_argument("--no-figure", action="store_true")
    common(sp, "report path; .json, .csv and .svg are written with its stem")

    sp = sub.add_parser("select", help="relevance-ratio profiling and stratified selection")
    sp.add_argument("--ckpt", required=True)
    sp.add_argument("--data", help="gen-data file; each record's target image is one sample")
    sp.add_argument("--task", type=_tasks, default=list(tg.TASKS))
    sp.add_argument("--samples", type=int, default=250, help="per task, when --data is absent")
    sp.add_argument("--budget", type=int, required=True)
    sp.add_argument("--k-set", type=_int_list, default="all")
    common(sp, "selected ids (one per line); profiles and manifest share its stem")

    sp = sub.add_parser("eval", help="held-out greedy accuracy per task")
    sp.add_argument("--ckpt", required=True)
    sp.add_argument("--adapter")
    sp.add_argument("--task", type=_tasks, default=list(tg.TASKS))
    sp.add_argument("--samples", type=int, default=100)
    common(sp, "output JSON")

    sp = sub.add_parser("finetune-lora", help="LoRA fine-tuning restricted to a layer mask")
    sp.add_argument("--ckpt", required=True)
    sp.add_argument("--task", type=_tasks, required=True)
    g = sp.add_mutually_exclusive_group(required=True)
    g.add_argument("--layers", type=_int_list)
    g.add_argument("--mask-from", help="change-rate report JSON; mask = layers above --threshold")
    sp.add_argument("--threshold", type=float, default=5.0, help="percent")
    sp.add_argument("--rank", type=int, default=8)
    sp.add_argument("--alpha", type=float, default=16.0)
    sp.add_argument("--steps", type=int, default=300)
    sp.add_argument("--batch", type=int, default=32)
    sp.add_argument("--lr", type=float, default=1e-3)
    sp.add_argument("--warmup", type=int, default=20)
    common(sp, "output adapter checkpoint")
    return p


def _parse(argv: Sequence[str]) -> argparse.Namespace:
    parser = build_parser()
    args = parser.parse_args(argv)
    if getattr(args, "config", None):
        with open(args.config, encoding="utf-8") as f:
            overrides = json.load(f)
        if not isinstance(overrides, dict):
            parser.error("--config must hold a JSON object")
        sub = parser._subparsers._group_actions[0].choices[args.command]  # noqa: SLF001
        known = {a.dest for a in sub._actions}  # noqa: SLF001
        defaults = {}
        for k, v in overrides.items():
            dest = k.replace("-", "_")
            if dest not in known:
                parser.error(f"--config sets unknown flag {k!r}")
            act = next(a for a in sub._actions if a.dest == dest)  # noqa: SLF001
            defaults[dest] = act.type(v) if act.type and isinstance(v, str) else v
        sub.set_defaults(**defaults)
        args = parser.parse_args(argv)
    return args


def _resolved(args: argparse.Namespace) -> dict[str, Any]:
    return {k: v for k, v in sorted(vars(args).items()) if k not in ("manifest",)}


def _write_manifest(args: argparse.Namespace, argv: Sequence[str], wall: float,
                    extra: dict[str, Any]) -> None:
    resolved = _resolved(args)
    blob = json.dumps(resolved, sort_keys=True, separators=(",", ":"), default=str)
    path = Path(args.manifest or str(Path(args.out).with_suffix("")) + ".manifest.json")
    manifest = {
        "argv": list(argv),
        "command": args.command,
        "resolved": resolved,
        "config_hash": hashlib.sha256(blob.encode()).hexdigest(),
        "wall_time_s": round(wall, 3),
        "versions": {"vflkit": __version__, "numpy": np.__version__,
                     "python": platform.python_version()},
        **extra,
    }
    path.write_text(json.dumps(manifest, sort_keys=True, indent=1, default=str) + "\n", encoding="utf-8")


def _load_params(path: str) -> M.Params:
    obj = T.load_checkpoint(path)
    if not isinstance(obj, M.Params):
        raise ContractError(f"{path} is an adapter checkpoint; expected model params")
    return obj


def _layers(spec, L: int, hi: int) -> list[int]:
    return list(range(hi)) if spec == "all" else list(spec)


def _pairs_from_file(path: str, task: str, limit: int) -> list[tg.PairedSample]:
    out = [s for _, s in tg.read_jsonl(path) if s.task == task]
    return out[:limit] if limit else out


# -- subcommands --------------------------------------------------------------

def cmd_gen_data(args) -> dict[str, Any]:
    samples = [s for t in args.task for s in tg.make_pairs(t, args.samples, args.seed, flip=args.flip)]
    n = tg.write_jsonl(samples, args.out)
    return {"outputs": [args.out], "n_samples": n}


def cmd_train(args) -> dict[str, Any]:
    tcfg = T.TrainConfig(steps=args.steps, batch=args.batch, lr=args.lr, warmup=args.warmup,
                         seed=args.seed, eval_every=args.eval_every, eval_samples=args.eval_samples,
                         mismatch=args.mismatch)
    log_path = args.log or str(Path(args.out).with_suffix("")) + ".metrics.csv"

    def show(row):
        accs = " ".join(f"{t}={row['acc_' + t]:.1f}" for t in tg.TASKS)
        print(f"step {row['step']:>6}  loss {row['loss']:.4f}  {accs}", file=sys.stderr, flush=True)

    params, rows = T.train_base(tcfg, M.ModelConfig(), log=show)
    T.save_checkpoint(params, args.out)
    T.write_metrics(rows, log_path)
    return {"outputs": [args.out, log_path]}


def cmd_probe_swap(args) -> dict[str, Any]:
    params = _load_params(args.ckpt)
    L = params.config.n_layers
    samples = (_pairs_from_file(args.data, args.task, args.samples) if args.data
               else tg.make_pairs(args.task, args.samples, args.seed))
    layers = _layers(args.layers, L, L)
    report = H.change_rate_sweep(params, samples, layers, seed=args.seed, jobs=args.jobs)
    paths = H.write_report(report, args.out, figure=not args.no_figure)
    for r in report.layers:
        print(f"{report.task}\tlayer {r.layer}\t{r.change_rate:6.1f}%", file=sys.stderr)
    return {"outputs": [str(p) for p in paths]}


def cmd_probe_drop(args) -> dict[str, Any]:
    params = _load_params(args.ckpt)
    L = params.config.n_layers
    samples = [s for t in args.task for s in tg.make_pairs(t, args.samples, args.seed)]
    ks = _layers(args.drop_at, L, L + 1)
    report = H.drop_sweep(params, samples, ks, seed=args.seed, jobs=args.jobs)
    paths = H.write_report(report, args.out, figure=not args.no_figure)
    return {"outputs": [str(p) for p in paths]}


def cmd_select(args) -> dict[str, Any]:
    params = _load_params(args.ckpt)
    cfg = params.config
    tok = tg.Tokenizer(cfg.vocab_size)
    if args.data:
        items = list(tg.read_jsonl(args.data))
    else:
        pairs = [s for t in args.task for s in tg.make_pairs(t, args.samples, args.seed)]
        items = list(enumerate(pairs))
    dataset = [(i, M.MultimodalSequence.build(cfg, s.target, tok.encode(s.prompt),
                                              tok.encode(s.target_truth) + [tok.EOS]))
               for i, s in items]
    ks = None if args.k_set == "all" else args.k_set
    profiles = S.profile_dataset(params, dataset, ks, jobs=args.jobs)
    chosen = S.partition_and_sample(profiles, args.budget, args.seed)
    stem = str(Path(args.out).with_suffix(""))
    prof_path, man_path = stem + ".profiles.jsonl", stem + ".json"
    S.write_profiles(profiles, prof_path)
    Path(args.out).write_text("".join(f"{i}\n" for i in chosen), encoding="utf-8")
    sel_manifest = {"budget": args.budget, "seed": args.seed, "n_profiles": len(profiles),
                    "group_sizes": {str(k): v for k, v in S.group_sizes(profiles, chosen).items()},
                    "pool_group_sizes": {str(k): v for k, v in S.group_sizes(
                        profiles, [p.id for p in profiles]).items()},
                    "sha256": S.selection_digest(chosen)}
    Path(man_path).write_text(json.dumps(sel_manifest, sort_keys=True, indent=1) + "\n", encoding="utf-8")
    return {"outputs": [args.out, prof_path, man_path]}


def cmd_eval(args) -> dict[str, Any]:
    params = _load_params(args.ckpt)
    model: Any = params
    if args.adapter:
        ad = T.load_checkpoint(args.adapter)
        if not isinstance(ad, T.LoraAdapter):
            raise ContractError(f"{args.adapter} is not an adapter checkpoint")
        model = T.attach_lora(params, ad)
    accs = T.evaluate_heldout(model, args.task, n=args.samples, seed=args.seed)
    Path(args.out).write_text(json.dumps({"accuracy": accs, "samples": args.samples,
                                          "seed": args.seed}, sort_keys=True, indent=1) + "\n",
                              encoding="utf-8")
    for t, a in accs.items():
        print(f"{t}\t{a:.1f}%", file=sys.stderr)
    return {"outputs": [args.out]}


def cmd_finetune_lora(args) -> dict[str, Any]:
    params = _load_params(args.ckpt)
    L = params.config.n_layers
    if args.mask_from:
        with open(args.mask_from, encoding="utf-8") as f:
            mask = T.mask_from_report(json.load(f), args.threshold)
    else:
        mask = _layers(args.layers, L, L)
    ad = T.init_adapter(params.config, mask, rank=args.rank, alpha=args.alpha, seed=args.seed)
    tcfg = T.TrainConfig(steps=args.steps, batch=args.batch, lr=args.lr, warmup=args.warmup,
                         seed=args.seed, mix={t: 1.0 / len(args.task) for t in args.task},
                         eval_every=0)
    trained = T.finetune_lora(T.attach_lora(params, ad), args.task, tcfg)
    T.save_checkpoint(trained, args.out)
    return {"outputs": [args.out], "layer_mask": sorted(mask)}


COMMANDS = {
    "gen-data": cmd_gen_data,
    "train": cmd_train,
    "probe-swap": cmd_probe_swap,
    "probe-drop": cmd_probe_drop,
    "select": cmd_select,
    "eval": cmd_eval,
    "finetune-lora": cmd_finetune_lora,
}


def run(argv: Sequence[str] | None = None) -> int:
    argv = list(sys.argv[1:] if argv is None else argv)
    try:
        args = _parse(argv)
    except SystemExit as e:
        return int(e.code or 0)
    except (OSError, json.JSONDecodeError) as e:
        print(f"vflkit: cannot read config: {e}", file=sys.stderr)
        return 1
    t0 = time.perf_counter()
    try:
        extra = COMMANDS[args.command](args)
        _write_manifest(args, argv, time.perf_counter() - t0, extra)
    except (OSError, M.FormatError) as e:
        print(f"vflkit: I/O error: {e}", file=sys.stderr)
        return 1
    except (ContractError, ShapeError, ValueError, IndexError, M.CapacityError) as e:
        print(f"vflkit: error: {e}", file=sys.stderr)
        return 2
    return 0


def main() -> None:
    sys.exit(run())
