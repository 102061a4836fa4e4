"""Command-line entry point: ``gridrl <command> [options]``."""

from __future__ import annotations

import argparse
import dataclasses
import hashlib
import json
import logging
import sys
import time
from pathlib import Path

import torch

from . import checkpoint
from .config import ConfigError, RunConfig, load, reference_page
from .experiments import split_sft_instability
from .gradcheck import run_suite
from .metrics import balance, config_hash, eval_mmu, eval_t2i
from .model import ModelError
from .pretrain import pretrain
from .taskgen import TaskError, read_jsonl, write_jsonl
from .tensor import GradCheckError, configure_runtime
from .trainer import ContractError, TrainerError, posttrain

log = logging.getLogger("gridrl")

EXIT_OK, EXIT_CONTRACT, EXIT_INPUT = 0, 1, 2


class InputError(ValueError):
    pass


class JsonlLog:
    """Append-only JSONL writer; timestamps only when asked for."""

    def __init__(self, path, with_timestamps: bool = False):
        self.path = Path(path)
        self.path.parent.mkdir(parents=True, exist_ok=True)
        self._fh = self.path.open("w")
        self.with_timestamps = with_timestamps

    def write(self, record: dict) -> None:
        if self.with_timestamps:
            record = {**record, "time": time.time()}
        self._fh.write(json.dumps(record, sort_keys=True) + "\n")

    def close(self) -> None:
        self._fh.close()


def _write_json(path, obj) -> None:
    Path(path).parent.mkdir(parents=True, exist_ok=True)
    Path(path).write_text(json.dumps(obj, indent=2, sort_keys=True) + "\n")


def _load_config(args) -> RunConfig:
    cfg = load(args.config) if getattr(args, "config", None) else RunConfig()
    if args.seed is not None:
        cfg = dataclasses.replace(cfg, seed=args.seed)
    return cfg


def _cfg_hash(cfg: RunConfig) -> str:
    return config_hash(cfg.to_flat())


def _load_ckpt(path, cfg: RunConfig):
    if not Path(path).exists():
        raise InputError(f"checkpoint {path} not found")
    return checkpoint.load(path, cfg.vocabulary())


def _tasks(path, v):
    if not Path(path).exists():
        raise InputError(f"task file {path} not found")
    return read_jsonl(path, v)


# --- commands -----------------------------------------------------------
def cmd_gen_data(args) -> int:
    cfg = _load_config(args)
    v = cfg.vocabulary()
    train, test = cfg.task_sets(v)
    out = Path(args.out)
    out.mkdir(parents=True, exist_ok=True)
    write_jsonl(train, v, out / "train.jsonl")
    write_jsonl(test, v, out / "test.jsonl")
    objs = cfg.object_split(v)
    manifest = {
        "config_hash": _cfg_hash(cfg),
        "n_train": len(train),
        "n_test": len(test),
        "test_sha256": hashlib.sha256((out / "test.jsonl").read_bytes()).hexdigest(),
        "train_objects": [v.object_names[i] for i in objs.train],
        "test_objects": [v.object_names[i] for i in objs.test],
    }
    _write_json(out / "test_manifest.json", manifest)
    (out / "config.cfg").write_text(cfg.dumps())
    print(f"wrote {len(train)} train / {len(test)} test tasks to {out}")
    return EXIT_OK


def cmd_pretrain(args) -> int:
    cfg = _load_config(args)
    v = cfg.vocabulary()
    out = Path(args.out)
    logf = JsonlLog(out.with_suffix(".log.jsonl"), args.with_timestamps)
    model, _ = pretrain(cfg.model, v, cfg.object_split(v), cfg.pretrain, callback=lambda s, m, rec: logf.write(rec))
    logf.close()
    checkpoint.save(out, model, _cfg_hash(cfg), {"seed": cfg.seed, "stage": "pretrain", "steps": cfg.pretrain.steps})
    out.with_suffix(".cfg").write_text(cfg.dumps())
    print(f"saved {out}")
    return EXIT_OK


def cmd_posttrain(args) -> int:
    cfg = _load_config(args)
    v = cfg.vocabulary()
    model, _ = _load_ckpt(args.ckpt, cfg)
    train, test = cfg.task_sets(v)
    gcfg = cfg.posttrain_config(args.method, args.mode)
    out = Path(args.out)
    logf = JsonlLog(out.with_suffix(".log.jsonl"), args.with_timestamps)
    cb = lambda s, m, rec: logf.write(rec)  # noqa: E731
    if args.method == "sft" and args.mode == "split":
        model, _, report = split_sft_instability(model, train, test, gcfg, cfg.seed, args.report_every, cb)
        _write_json(out.with_suffix(".instability.json"), report)
        print(f"split-mode SFT instability report: t2i {report['t2i_start']} -> {report['t2i_end']}")
    else:
        model, _ = posttrain(model, train, gcfg, args.method, cfg.seed, cb)
    logf.close()
    checkpoint.save(
        out, model, _cfg_hash(cfg),
        {"seed": cfg.seed, "stage": f"{args.method}-{args.mode}", "steps": gcfg.steps},
    )
    out.with_suffix(".cfg").write_text(cfg.dumps())
    print(f"saved {out}")
    return EXIT_OK


def _report_acc(r: dict) -> dict:
    return {"per_category": r["per_category"], "overall": r["overall"]}


def cmd_eval(args) -> int:
    cfg = _load_config(args)
    model, header = _load_ckpt(args.ckpt, cfg)
    tasks = _tasks(args.tasks, model.vocab)
    t2i = eval_t2i(model, tasks, cfg.decode, torch.Generator().manual_seed(cfg.seed))
    mmu = eval_mmu(model, tasks, cfg.decode)
    report = {
        "t2i": _report_acc(t2i),
        "mmu": _report_acc(mmu),
        "n_tasks": len(tasks),
        "config_hash": _cfg_hash(cfg),
        "checkpoint_config_hash": header["config_hash"],
        "seed": cfg.seed,
    }
    _write_json(args.report, report)
    print(f"t2i {t2i['overall']:.4f} mmu {mmu['overall']:.4f}")
    return EXIT_OK


def cmd_balance(args) -> int:
    cfg = _load_config(args)
    model, header = _load_ckpt(args.ckpt, cfg)
    tasks = _tasks(args.tasks, model.vocab)
    summary, trace = balance(model, tasks, cfg.decode, cfg.seed)
    c = summary.pop("counts")
    report = {
        **summary,
        "n_images_correct": c.n_images_correct,
        "n_answers_correct": c.n_answers_correct,
        "n_both_image_chain": c.n_both_image_chain,
        "n_both_answer_chain": c.n_both_answer_chain,
        "n_tasks": len(tasks),
        "config_hash": _cfg_hash(cfg),
        "checkpoint_config_hash": header["config_hash"],
        "seed": cfg.seed,
    }
    _write_json(args.report, report)
    tracef = JsonlLog(Path(args.report).with_suffix(".trace.jsonl"), args.with_timestamps)
    for rec in trace:
        tracef.write(rec)
    tracef.close()
    print(f"mmu|t2i {report['mmu_given_t2i']} t2i|mmu {report['t2i_given_mmu']}")
    return EXIT_OK


def cmd_gradcheck(args) -> int:
    def show(r):
        print(f"{'ok  ' if r.passed else 'FAIL'} {r.name:40s} {r.max_rel_error:.3e}")

    results = run_suite(seed=args.seed or 0, log=show)
    failed = [r for r in results if not r.passed]
    print(f"{len(results) - len(failed)}/{len(results)} checks passed")
    return EXIT_CONTRACT if failed else EXIT_OK


def cmd_inspect(args) -> int:
    if not Path(args.ckpt).exists():
        raise InputError(f"checkpoint {args.ckpt} not found")
    vocab = _load_config(args).vocabulary() if args.config else None
    model, header = checkpoint.load(args.ckpt, vocab)
    print(f"config_hash {header['config_hash']}")
    print(f"model_config {json.dumps(header['model_config'], sort_keys=True)}")
    print(f"rng_state {json.dumps(header['rng_state'], sort_keys=True)}")
    print(f"parameters {model.params.num_elements()}")
    for name, p in model.params.items():
        print(f"  {name:20s} {tuple(p.shape)}")
    print(header["vocab_manifest"], end="")
    return EXIT_OK


def cmd_defaults(args) -> int:
    print(reference_page() if args.markdown else RunConfig().dumps(), end="")
    return EXIT_OK


# --- parser -------------------------------------------------------------
def build_parser() -> argparse.ArgumentParser:
    common = argparse.ArgumentParser(add_help=False)
    common.add_argument("--seed", type=int, default=None, help="override the configured seed")
    common.add_argument("--threads", type=int, default=1, help="worker thread cap (default 1)")
    common.add_argument("--with-timestamps", action="store_true", help="add wall-clock times to JSONL logs")
    common.add_argument("--log-level", default="WARNING", help="python logging level")

    p = argparse.ArgumentParser(prog="gridrl", description="Self-improving post-training on a grid micro-world.")
    sub = p.add_subparsers(dest="command", required=True)

    def add(name, fn, help_):
        sp = sub.add_parser(name, parents=[common], help=help_, description=help_)
        sp.set_defaults(fn=fn)
        return sp

    sp = add("gen-data", cmd_gen_data, "write train/test task JSONL and the frozen test manifest")
    sp.add_argument("--config", help="run config file")
    sp.add_argument("--out", required=True, help="output directory")

    sp = add("pretrain", cmd_pretrain, "train the skewed baseline")
    sp.add_argument("--config", help="run config file")
    sp.add_argument("--out", required=True, help="checkpoint path")

    sp = add("posttrain", cmd_posttrain, "SFT or GRPO post-training from a checkpoint")
    sp.add_argument("--method", choices=("sft", "grpo"), required=True)
    sp.add_argument("--mode", choices=("e2e", "split"), required=True)
    sp.add_argument("--ckpt", required=True, help="input checkpoint")
    sp.add_argument("--config", help="run config file")
    sp.add_argument("--out", required=True, help="output checkpoint path")
    sp.add_argument("--report-every", type=int, default=250, help="split-SFT report interval in steps")

    for name, fn, help_ in (
        ("eval", cmd_eval, "T2I and MMU accuracies"),
        ("balance", cmd_balance, "two-chain conditional accuracies"),
    ):
        sp = add(name, fn, help_)
        sp.add_argument("--ckpt", required=True, help="checkpoint path")
        sp.add_argument("--tasks", required=True, help="task JSONL file")
        sp.add_argument("--config", help="run config file")
        sp.add_argument("--report", required=True, help="output JSON path")

    add("gradcheck", cmd_gradcheck, "finite-difference audit of every op and the model")

    sp = add("inspect", cmd_inspect, "print config hash, parameter counts and vocabulary manifest")
    sp.add_argument("--ckpt", required=True, help="checkpoint path")
    sp.add_argument("--config", help="run config file")

    sp = add("defaults", cmd_defaults, "print the default config")
    sp.add_argument("--markdown", action="store_true", help="print the reference table instead")
    return p


def main(argv=None) -> int:
    args = build_parser().parse_args(argv)
    logging.basicConfig(level=getattr(logging, str(args.log_level).upper(), logging.WARNING))
    configure_runtime(args.threads)
    try:
        return args.fn(args)
    except (ConfigError, checkpoint.CheckpointError, InputError, TaskError, FileNotFoundError) as exc:
        print(f"error: {exc}", file=sys.stderr)
        return EXIT_INPUT
    except (ContractError, GradCheckError, ModelError, TrainerError) as exc:
        print(f"contract violation: {exc}", file=sys.stderr)
        return EXIT_CONTRACT


if __name__ == "__main__":
    sys.exit(main())
