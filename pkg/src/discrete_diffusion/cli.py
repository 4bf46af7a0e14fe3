"""Command-line interface: ``train``, ``eval``, ``trace``, ``ablate`` and ``dataset gen``.

Exit codes: 0 success, 2 bad usage/config or incompatible inputs,
3 training diverged, 4 some ablation cells failed.
"""

import argparse
import json
import logging
import os
import subprocess
import sys
import time
from concurrent.futures import ProcessPoolExecutor
from pathlib import Path

import numpy as np

from . import __version__
from . import checkpoint as ckptmod
from . import config as cfgmod
from . import datasets, experiment
from .config import ConfigError
from .datasets import DatasetError
from .denoiser import encode
from .sampler import sample, trajectory_records
from .training import DivergenceError

OUT_ROOT_ENV = "ADD_OUT_ROOT"
DEFAULT_OUT_ROOT = "runs"
GUIDANCE_ON = 1.25

EXIT_OK, EXIT_USAGE, EXIT_DIVERGED, EXIT_PARTIAL = 0, 2, 3, 4

log = logging.getLogger("discrete_diffusion")


class UsageError(Exception):
    pass


def _dump(obj):
    return json.dumps(obj, sort_keys=True, separators=(",", ":"))


def _write_json(path, obj):
    Path(path).write_text(json.dumps(obj, sort_keys=True, indent=2) + "\n")


def _revision():
    here = Path(__file__).resolve().parent
    try:
        out = subprocess.run(
            ["git", "rev-parse", "HEAD"], cwd=here, capture_output=True, text=True, timeout=5, check=True
        )
        return out.stdout.strip()
    except (OSError, subprocess.SubprocessError):
        return f"discrete-diffusion {__version__}"


def _out_dir(arg, cfg, name):
    if arg:
        return Path(arg)
    root = Path(os.environ.get(OUT_ROOT_ENV, DEFAULT_OUT_ROOT))
    return root / f"{name}-{cfg['task']}-{cfg['method']}-seed{cfg['seed']}"


def data_seed(cfg, split):
    """Integer dataset seed for ``split`` derived from the config ``seed``."""
    return int(cfgmod.seeds(cfg)[f"{split}_data"].generate_state(1)[0])


def make_datasets(cfg):
    task = cfgmod.make_task(cfg)
    train = datasets.generate(task, cfg["n_train"], data_seed(cfg, "train"))
    test = datasets.generate(task, cfg["n_test"], data_seed(cfg, "test"))
    return train, test


def _checkpoint(state, cfg, step):
    return ckptmod.Checkpoint(
        denoiser=state.denoiser,
        encoder=state.encoder,
        schedule=cfgmod.schedule(cfg),
        method=cfg["method"],
        task={"name": cfg["task"], **cfgmod.make_task(cfg).__dict__},
        config=cfg,
        step=step,
    )


# ---------------------------------------------------------------------------
# train


def run_training(cfg, config_text, out_dir):
    """Train one model into ``out_dir``; returns ``(exit code, eval record or None)``."""
    out_dir = Path(out_dir)
    out_dir.mkdir(parents=True, exist_ok=True)
    manifest = {
        "config_text": config_text,
        "config": cfg,
        "revision": _revision(),
        "seed": cfg["seed"],
        "start_time": time.strftime("%Y-%m-%dT%H:%M:%S%z"),
        "end_time": None,
        "status": "running",
        "data_seeds": {"train": data_seed(cfg, "train"), "test": data_seed(cfg, "test")},
        "outputs": {
            "metrics": str(out_dir / "metrics.jsonl"),
            "checkpoint": str(out_dir / "final.ckpt"),
            "eval": str(out_dir / "eval.json"),
        },
    }
    _write_json(out_dir / "manifest.json", manifest)
    train_ds, test_ds = make_datasets(cfg)
    metrics_path = out_dir / "metrics.jsonl"
    every = cfg["checkpoint_every"]

    with open(metrics_path, "w") as metrics:

        def on_step(record):
            metrics.write(_dump(record) + "\n")

        def on_epoch(epoch, state):
            if every > 0 and (epoch + 1) % every == 0:
                ckptmod.save(_checkpoint(state, cfg, state.step), out_dir / f"epoch{epoch + 1:04d}.ckpt")

        state = experiment.build_state(cfg, len(train_ds))
        try:
            experiment.train(cfg, train_ds, state, on_step, on_epoch)
        except DivergenceError as exc:
            # the failing step never touched the parameters, so they are the last good ones
            ckptmod.save(_checkpoint(state, cfg, state.step), out_dir / "last_good.ckpt")
            manifest.update(status="diverged", error=str(exc), end_time=time.strftime("%Y-%m-%dT%H:%M:%S%z"))
            _write_json(out_dir / "manifest.json", manifest)
            log.error("training diverged at step %d: %s", state.step, exc)
            return EXIT_DIVERGED, None

    ckptmod.save(_checkpoint(state, cfg, state.step), out_dir / "final.ckpt")
    record = experiment.evaluate(
        state.denoiser,
        state.encoder,
        test_ds,
        cfgmod.sample_config(cfg),
        cfgmod.schedule(cfg),
        method=cfg["method"],
        rounds=cfg["pdd_rounds"],
    )
    _write_json(out_dir / "eval.json", record)
    manifest.update(
        status="completed",
        end_time=time.strftime("%Y-%m-%dT%H:%M:%S%z"),
        checkpoint_sha256=ckptmod.checksum(out_dir / "final.ckpt"),
    )
    _write_json(out_dir / "manifest.json", manifest)
    return EXIT_OK, record


def cmd_train(args):
    cfg, text = cfgmod.load(args.config, _overrides(args))
    out_dir = _out_dir(args.out, cfg, Path(args.config).stem)
    code, record = run_training(cfg, text, out_dir)
    if record is not None:
        print(_dump(record))
    print(f"run directory: {out_dir}", file=sys.stderr)
    return code


# ---------------------------------------------------------------------------
# eval / trace


def _load_eval_inputs(args):
    ckpt = ckptmod.load(args.checkpoint)
    cfg = ckpt.config
    if args.dataset:
        ds = datasets.load(args.dataset)
    else:
        task = cfgmod.make_task(cfg)
        ds = datasets.generate(task, cfg["n_test"], data_seed(cfg, "test"))
    if args.n:
        ds = ds.head(args.n)
    den, enc = ckpt.denoiser.spec, ckpt.encoder.spec
    if ds.features.shape[2] != enc.token_dim:
        raise UsageError(f"dataset token dim {ds.features.shape[2]} != checkpoint {enc.token_dim}")
    sequence = ds.scenes.shape[1] > 0
    width = ds.targets.shape[1] if sequence else 1
    if width != den.seq_len:
        raise UsageError(f"dataset sequence length {width} != checkpoint {den.seq_len}")
    K = den.K - (ckpt.method == "pdd")
    if int(ds.targets.max()) >= K:
        raise UsageError(f"dataset labels reach {int(ds.targets.max())} but checkpoint has {K} classes")
    changes = {
        k: v
        for k, v in {
            "steps": args.steps,
            "to_one": args.to_one,
            "guidance_scale": args.guidance,
            "renoise_variant": args.renoise_variant,
            "temperature": args.temperature,
            "seed": args.seed,
        }.items()
        if v is not None
    }
    return ckpt, ds, cfgmod.sample_config(cfg, **changes)


def cmd_eval(args):
    ckpt, ds, scfg = _load_eval_inputs(args)
    rounds = args.rounds or ckpt.config["pdd_rounds"]
    record = experiment.evaluate(ckpt.denoiser, ckpt.encoder, ds, scfg, ckpt.schedule, ckpt.method, rounds)
    record.update(scfg.to_dict(), method=ckpt.method, checkpoint_sha256=ckptmod.checksum(args.checkpoint))
    if ckpt.method == "pdd":
        record["rounds"] = rounds
    text = _dump(record)
    if args.out:
        Path(args.out).write_text(text + "\n")
    print(text)
    return EXIT_OK


def cmd_trace(args):
    ckpt, ds, scfg = _load_eval_inputs(args)
    if ckpt.method != "add":
        raise UsageError("trace needs a diffusion checkpoint; the masked baseline has no trajectory")
    c = encode(ckpt.encoder, ds.features)
    final, traj = sample(ckpt.denoiser, c, scfg, ckpt.schedule, np.random.default_rng(scfg.seed))
    ids = range(min(args.count, len(ds)))
    out = open(args.out, "w") if args.out else sys.stdout
    try:
        for rec in trajectory_records(traj, ids):
            out.write(_dump(rec) + "\n")
    finally:
        if args.out:
            out.close()
    return EXIT_OK


# ---------------------------------------------------------------------------
# ablate

LOSS_KINDS = ("weighted_ce", "unweighted_ce", "mse_noise")
TO_ONES = ("argmax_onehot", "softmax_sample")


def _cell_seed(seed, index):
    return int(np.random.SeedSequence([seed, index]).generate_state(1)[0])


def _ablate_model(job):
    """Train one model and evaluate every cell that shares it. Runs in a worker."""
    name, cfg, text, out_dir, cells = job
    rows = []
    try:
        code, _ = run_training(cfg, text, out_dir)
        if code != EXIT_OK:
            raise RuntimeError(f"training exited with code {code}")
        ckpt = ckptmod.load(Path(out_dir) / "final.ckpt")
        _, test_ds = make_datasets(cfg)
    except Exception as exc:  # noqa: BLE001 - recorded per cell, the grid continues
        return [{**cell, "status": "failed", "error": f"{type(exc).__name__}: {exc}"} for cell in cells]
    for cell in cells:
        try:
            if cfg["method"] == "pdd":
                scfg = cfgmod.sample_config(cfg)
            else:
                scfg = cfgmod.sample_config(cfg, guidance_scale=cell["guidance_scale"], to_one=cell["to_one"])
            rec = experiment.evaluate(
                ckpt.denoiser, ckpt.encoder, test_ds, scfg, ckpt.schedule, cfg["method"], cfg["pdd_rounds"]
            )
            rows.append({**cell, **rec, "status": "ok"})
        except Exception as exc:  # noqa: BLE001
            rows.append({**cell, "status": "failed", "error": f"{type(exc).__name__}: {exc}"})
    return rows


def ablation_jobs(cfg, text, out_dir):
    """One training job per loss kind plus the masked baseline; 12 + 1 cells in total."""
    jobs = []
    for i, loss in enumerate(LOSS_KINDS):
        model_cfg = {**cfg, "loss_kind": loss, "method": "add", "seed": _cell_seed(cfg["seed"], i)}
        cells = [
            {"cell": f"{loss}/{'cfg_on' if w != 1.0 else 'cfg_off'}/{to_one}", "loss_kind": loss,
             "guidance_scale": w, "to_one": to_one, "task": cfg["task"], "method": "add"}
            for w in (GUIDANCE_ON, 1.0)
            for to_one in TO_ONES
        ]
        jobs.append((loss, model_cfg, text, str(Path(out_dir) / loss), cells))
    base_cfg = cfgmod.resolve(
        {**cfg, "task": "grammar", "method": "pdd", "loss_kind": "weighted_ce", "seed": _cell_seed(cfg["seed"], 99)}
    )
    base_cell = [{"cell": "pdd_baseline", "loss_kind": None, "guidance_scale": None, "to_one": None,
                  "task": "grammar", "method": "pdd"}]
    jobs.append(("pdd_baseline", base_cfg, text, str(Path(out_dir) / "pdd_baseline"), base_cell))
    return jobs


def cmd_ablate(args):
    cfg, text = cfgmod.load(args.config, _overrides(args))
    out_dir = _out_dir(args.out, cfg, "ablate-" + Path(args.config).stem)
    out_dir.mkdir(parents=True, exist_ok=True)
    jobs = ablation_jobs(cfg, text, out_dir)
    _write_json(
        out_dir / "manifest.json",
        {"config_text": text, "config": cfg, "revision": _revision(), "seed": cfg["seed"],
         "start_time": time.strftime("%Y-%m-%dT%H:%M:%S%z"), "cells": sum(len(j[4]) for j in jobs)},
    )
    if args.workers > 1:
        with ProcessPoolExecutor(args.workers) as pool:
            results = list(pool.map(_ablate_model, jobs))
    else:
        results = [_ablate_model(job) for job in jobs]
    rows = [row for group in results for row in group]
    table = {"columns": ["cell", "loss_kind", "guidance_scale", "to_one", "accuracy", "validity",
                         "semantic_match", "status"], "rows": rows}
    (out_dir / "ablation.json").write_text(_dump(table) + "\n")
    failed = [r["cell"] for r in rows if r["status"] != "ok"]
    for r in rows:
        metric = r.get("accuracy", r.get("semantic_match"))
        print(f"{r['cell']:<40} {r['status']:<7} {'' if metric is None else f'{metric:.4f}'}")
    if failed:
        log.error("failed cells: %s", ", ".join(failed))
        return EXIT_PARTIAL
    return EXIT_OK


# ---------------------------------------------------------------------------
# dataset


def cmd_dataset_gen(args):
    values = {"task": args.task, "seed": args.seed, **_overrides(args)}
    cfg = cfgmod.resolve(values)
    ds = datasets.generate(cfgmod.make_task(cfg), args.n, args.seed)
    datasets.save(ds, args.out)
    print(_dump({"path": str(args.out), "n": len(ds), "task": args.task, "seed": args.seed}))
    return EXIT_OK


# ---------------------------------------------------------------------------
# argument parsing


def _add_config_flags(parser, skip=()):
    group = parser.add_argument_group("config overrides (a flag wins over the file)")
    for key, (kind, _) in cfgmod.SCHEMA.items():
        if key in skip:
            continue
        names = sorted({f"--{key}", f"--{key.replace('_', '-')}"})
        group.add_argument(*names, dest=f"cfg_{key}", type=kind, default=None, metavar=kind.__name__.upper())


def _overrides(args):
    return {k[4:]: v for k, v in vars(args).items() if k.startswith("cfg_") and v is not None}


def _add_eval_flags(parser):
    parser.add_argument("checkpoint")
    parser.add_argument("--dataset", help="dataset file; default regenerates the run's test split")
    parser.add_argument("--n", type=int, help="evaluate only the first N records")
    parser.add_argument("--steps", type=int)
    parser.add_argument("--to-one", choices=TO_ONES)
    parser.add_argument("--guidance", type=float)
    parser.add_argument("--renoise-variant", choices=("alpha", "alpha_bar"))
    parser.add_argument("--temperature", type=float)
    parser.add_argument("--seed", type=int)
    parser.add_argument("--out")


def build_parser():
    parser = argparse.ArgumentParser(prog="discrete-diffusion", description=__doc__.splitlines()[0])
    parser.add_argument("-v", "--verbose", action="store_true")
    sub = parser.add_subparsers(dest="command", required=True)

    p = sub.add_parser("train", help="train one model from a config file")
    p.add_argument("config")
    p.add_argument("--out", help=f"run directory (default ${OUT_ROOT_ENV}/<name>)")
    _add_config_flags(p)
    p.set_defaults(func=cmd_train)

    p = sub.add_parser("eval", help="evaluate a checkpoint")
    _add_eval_flags(p)
    p.add_argument("--rounds", type=int, help="unmasking rounds for the masked baseline")
    p.set_defaults(func=cmd_eval)

    p = sub.add_parser("trace", help="dump per-step sampling records")
    _add_eval_flags(p)
    p.add_argument("--count", type=int, default=4, help="number of samples to trace")
    p.set_defaults(func=cmd_trace)

    p = sub.add_parser("ablate", help="run the loss x guidance x sampling grid plus the masked baseline")
    p.add_argument("config")
    p.add_argument("--out")
    p.add_argument("--workers", type=int, default=1)
    _add_config_flags(p)
    p.set_defaults(func=cmd_ablate)

    p = sub.add_parser("dataset", help="dataset utilities")
    dsub = p.add_subparsers(dest="dataset_command", required=True)
    g = dsub.add_parser("gen", help="write a dataset file")
    g.add_argument("--task", choices=cfgmod.TASKS, required=True)
    g.add_argument("--n", type=int, required=True)
    g.add_argument("--seed", type=int, required=True)
    g.add_argument("--out", required=True)
    _add_config_flags(g, skip=("task", "seed"))
    g.set_defaults(func=cmd_dataset_gen)
    return parser


def main(argv=None):
    parser = build_parser()
    args = parser.parse_args(argv)
    logging.basicConfig(level=logging.INFO if args.verbose else logging.WARNING, format="%(levelname)s %(message)s")
    try:
        return args.func(args)
    except (ConfigError, DatasetError, ckptmod.CheckpointError, UsageError, FileNotFoundError) as exc:
        print(f"error: {exc}", file=sys.stderr)
        return EXIT_USAGE


if __name__ == "__main__":
    sys.exit(main())
