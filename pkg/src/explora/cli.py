"""Command-line driver: ``python -m explora <subcommand> ...``.

Configuration precedence is JSON file (``--config``) < ``EXPLORA_*`` environment
variables < command-line flags. A config file may be flat or hold one object per
subcommand (``{"pretrain": {...}}``); keys are flag names with ``-`` or ``_``.

Exit codes: 0 success, 1 usage / contract error, 2 data or integrity error,
3 numeric failure.
"""

from __future__ import annotations

import argparse
import json
import logging
import os
import sys
from pathlib import Path

from . import archive
from .autograd import ContractError, NumericError
from .peft import CompatibilityError, Partition, StateError
from .vit import ARCHS, ViTConfig, ViTModel, param_count

log = logging.getLogger("explora")

EXIT_OK, EXIT_USAGE, EXIT_DATA, EXIT_NUMERIC = 0, 1, 2, 3
ENV_PREFIX = "EXPLORA_"
TARGET_LETTERS = {"q": "Q", "k": "K", "v": "V", "o": "O", "m": "MLP"}


class UsageError(Exception):
    """Bad command line; maps to exit code 1."""


class _Parser(argparse.ArgumentParser):
    def error(self, message):
        raise UsageError(f"{self.prog}: {message}")


# ---------------------------------------------------------------------------
# small parsers for flag values
# ---------------------------------------------------------------------------

def parse_blocks(text, depth: int | None = None) -> frozenset[int]:
    """``"24"``, ``"1,2,24"``, ``"last"``, ``"none"`` or ``""`` -> a set of 1-based block indices."""
    if isinstance(text, (list, tuple, set, frozenset)):
        return frozenset(int(b) for b in text)
    text = str(text).strip().lower()
    if text in ("", "none", "-"):
        return frozenset()
    try:
        return frozenset(depth if t.strip() == "last" and depth else int(t) for t in text.split(",") if t.strip())
    except ValueError as e:
        raise UsageError(f"cannot parse block list {text!r}") from e


def parse_targets(text) -> frozenset[str]:
    """``"qv"`` / ``"qkvo"`` / ``"qvm"`` (m = MLP) or ``"Q,V"`` -> target names."""
    if isinstance(text, (list, tuple, set, frozenset)):
        return frozenset(text)
    text = str(text).strip()
    if "," in text:
        return frozenset(t.strip().upper() for t in text.split(",") if t.strip())
    try:
        return frozenset(TARGET_LETTERS[c] for c in text.lower())
    except KeyError as e:
        raise UsageError(f"unknown target letter {e.args[0]!r}; use any of {''.join(TARGET_LETTERS)}") from e


def human(n: int) -> str:
    return f"{n / 1e6:.2f}M" if n >= 1e5 else f"{n / 1e3:.1f}K" if n >= 1e3 else str(n)


# ---------------------------------------------------------------------------
# model / data loading helpers
# ---------------------------------------------------------------------------

def load_base(spec: str) -> ViTModel:
    """A model archive path, or ``init:<arch>[:<seed>]`` for a deterministic fresh init."""
    from .train import load_model
    if spec.startswith("init:"):
        parts = spec.split(":")
        arch = parts[1] if len(parts) > 1 and parts[1] else "desk"
        if arch not in ARCHS:
            raise UsageError(f"unknown arch {arch!r}; choose from {sorted(ARCHS)}")
        seed = int(parts[2]) if len(parts) > 2 else 0
        return ViTModel(ViTConfig(**ARCHS[arch]), seed=seed)
    return load_model(spec)


def load_dataset(path):
    from .data import DatasetManifest
    return DatasetManifest.load(path)


def _with_delta(model: ViTModel, delta_path):
    if not delta_path:
        return model
    from .train import load_delta
    return load_delta(delta_path, model).apply(model, "merge")


def _probe_data(man) -> dict:
    x_tr, y_tr = man.load_split("train")
    if "val" in man.shards:
        x_va, y_va = man.load_split("val")
    else:
        from .analysis import _split
        tr, va = _split(len(y_tr), 0)
        x_tr, y_tr, x_va, y_va = x_tr[tr], y_tr[tr], x_tr[va], y_tr[va]
    return {"x_train": x_tr, "y_train": y_tr, "x_val": x_va, "y_val": y_va}


def _emit(obj, out=None) -> None:
    text = json.dumps(obj, indent=2, sort_keys=True, default=float)
    if out:
        Path(out).write_text(text + "\n")
    print(text)


# ---------------------------------------------------------------------------
# subcommands
# ---------------------------------------------------------------------------

def cmd_gen_data(a) -> int:
    from .data import SyntheticDomainSpec, gen_data
    spec = SyntheticDomainSpec(domain=a.domain, classes=a.classes, image_size=a.image_size, seed=a.seed)
    man = gen_data(spec, a.n_train, a.n_val, a.out)
    print(f"wrote {man.splits} {spec.domain} images to {man.root}")
    return EXIT_OK


def cmd_pretrain(a) -> int:
    from .train import RunConfig, pretrain, save_delta
    base = load_base(a.base)
    images, _ = load_dataset(a.data).load_split("train")
    part = Partition(parse_blocks(a.unfreeze, base.config.depth), a.rank, parse_targets(a.targets),
                     norms_unfrozen=not a.freeze_norms)
    part.validate(base.config.depth)
    run = RunConfig(objective=a.objective, partition=part, batch_size=a.batch_size, accum_steps=a.accum,
                    seed=a.seed, iterations=a.iters, warmup_iters=min(a.warmup, max(a.iters, 1)),
                    base_lr=a.lr, log_every=a.log_every, dataset=str(a.data))
    log_file = open(a.log, "a") if a.log else None

    def log_fn(rec):
        line = json.dumps(rec, sort_keys=True, default=float)
        if log_file:
            log_file.write(line + "\n")
            log_file.flush()
        else:
            print(line, file=sys.stderr)

    try:
        ckpt = pretrain(base, run, images, log_fn=log_fn, resume_from=a.resume, stop_at=a.stop_at,
                        state_out=a.state_out)
    finally:
        if log_file:
            log_file.close()
    save_delta(a.out, ckpt)
    print(f"delta: {ckpt.delta.num_scalars()} scalars after {ckpt.meta['iteration']} iterations -> {a.out}")
    return EXIT_OK


def cmd_finetune(a) -> int:
    from .train import FinetuneConfig, finetune
    model = _with_delta(load_base(a.base), a.delta)
    cfg = FinetuneConfig(mode=a.mode, rank=a.rank, iterations=a.iters, base_lr=a.lr, batch_size=a.batch_size,
                         drop_path=a.drop_path, seed=a.seed, pool=a.pool)
    res = finetune(model, _probe_data(load_dataset(a.data)), cfg)
    _emit({"mode": a.mode, **res.metrics}, a.out)
    return EXIT_OK


def cmd_linprobe(a) -> int:
    from .analysis import FEATURE_SPECS, LINPROBE_LRS, evaluate_linprobe
    model = _with_delta(load_base(a.base), a.delta)
    lrs = tuple(float(x) for x in a.lrs.split(",")) if a.lrs else LINPROBE_LRS
    res = evaluate_linprobe(model, _probe_data(load_dataset(a.data)), FEATURE_SPECS, lrs, a.epochs, a.seed)
    _emit({"best_acc": res["best_acc"], "best": res["best"], "cells": res["cells"]}, a.out)
    return EXIT_OK


def cmd_analyze(a) -> int:
    from .analysis import block_spectra, class_probe, dump_features, position_probe, recommend_unfreeze
    model = _with_delta(load_base(a.base), a.delta)
    man = load_dataset(a.data)
    x, y = man.load_split("train")
    x, y = x[:a.samples], y[:a.samples]
    dump = dump_features(model, x, dataset_id=man.checksums.get("train", "")[:16])
    rep = block_spectra(dump)
    print(rep.table())
    probes = {}
    if a.probes:
        probes = {b: {"position": position_probe(dump, b, a.seed), "class": class_probe(dump, b, y, a.seed)}
                  for b in range(1, dump.depth + 1)}
        for b, p in probes.items():
            print(f"block {b}: position {p['position']:.3f} class {p['class']:.3f}")
    rec = recommend_unfreeze(rep, a.k)
    print(f"recommended blocks to unfreeze (k={a.k}): {rec}")
    if a.csv:
        Path(a.csv).write_text(rep.to_csv())
    if a.dump:
        dump.save(a.dump)
    return EXIT_OK


def cmd_merge(a) -> int:
    from .train import merge_to_file
    base = load_base(a.base)
    merge_to_file(base, a.delta, a.out)
    print(f"merged model -> {a.out}")
    return EXIT_OK


def cmd_count_params(a) -> int:
    cfg = ViTConfig(**ARCHS[a.arch])
    part = Partition(parse_blocks(a.unfreeze, cfg.depth), a.rank, parse_targets(a.targets),
                     norms_unfrozen=not a.freeze_norms)
    part.validate(cfg.depth)
    c = param_count(cfg, part)
    total = c["trainable"] + c["frozen"]
    print(f"trainable {human(c['trainable'])} ({c['trainable']:,}) of {human(total)} "
          f"[{100.0 * c['trainable'] / total:.2f}%]")
    for k, v in sorted(c["by_category"].items()):
        print(f"  {k:<11} {v:>12,}")
    return EXIT_OK


# ---------------------------------------------------------------------------
# argument parsing with file < env < flag precedence
# ---------------------------------------------------------------------------

def _partition_flags(p, unfreeze: str = "none") -> None:
    p.add_argument("--unfreeze", default=unfreeze, help="1-based blocks trained in full: '24', '1,24', 'last', 'none'")
    p.add_argument("--rank", type=int, default=8)
    p.add_argument("--targets", default="qv", help="LoRA targets: letters from qkvom (m = MLP)")
    p.add_argument("--freeze-norms", action="store_true", help="keep layer norms frozen")


def build_parser() -> _Parser:
    top = _Parser(prog="explora", description="Parameter-efficient extended pre-training of ViTs.")
    top.add_argument("--config", default=argparse.SUPPRESS, help="JSON config file")
    top.add_argument("-v", "--verbose", action="store_true")
    sub = top.add_subparsers(dest="command", parser_class=_Parser)

    p = sub.add_parser("gen-data", help="write a synthetic domain dataset")
    p.add_argument("--domain", default="source_rgb")
    p.add_argument("--classes", type=int, default=6)
    p.add_argument("--image-size", type=int, default=32)
    p.add_argument("--n-train", type=int, default=1000)
    p.add_argument("--n-val", type=int, default=500)
    p.add_argument("--seed", type=int, default=0)
    p.add_argument("--out", required=True)
    p.set_defaults(func=cmd_gen_data)

    p = sub.add_parser("pretrain", help="extended pre-training; writes a delta checkpoint")
    p.add_argument("--base", default="init:desk:0", help="model archive or init:<arch>:<seed>")
    p.add_argument("--data", required=True)
    p.add_argument("--objective", default="dino", choices=("dino", "mae"))
    _partition_flags(p, unfreeze="last")
    p.add_argument("--iters", type=int, default=300)
    p.add_argument("--warmup", type=int, default=20)
    p.add_argument("--batch-size", type=int, default=16)
    p.add_argument("--accum", type=int, default=1)
    p.add_argument("--lr", type=float, default=2e-3)
    p.add_argument("--seed", type=int, default=0)
    p.add_argument("--log-every", type=int, default=10)
    p.add_argument("--log", help="append JSON-lines scalars here (default: stderr)")
    p.add_argument("--resume", help="run-state archive to resume from")
    p.add_argument("--state-out", help="write resumable run state here")
    p.add_argument("--stop-at", type=int, help="stop after this many iterations (the schedule still spans --iters)")
    p.add_argument("--out", required=True)
    p.set_defaults(func=cmd_pretrain)

    p = sub.add_parser("finetune", help="supervised LoRA / full / linear fine-tuning")
    p.add_argument("--base", default="init:desk:0")
    p.add_argument("--delta")
    p.add_argument("--data", required=True)
    p.add_argument("--mode", default="lora", choices=("lora", "linear_probe", "full"))
    p.add_argument("--rank", type=int, default=8)
    p.add_argument("--iters", type=int, default=200)
    p.add_argument("--lr", type=float, default=1e-3)
    p.add_argument("--batch-size", type=int, default=32)
    p.add_argument("--drop-path", type=float, default=0.2)
    p.add_argument("--pool", default="cls", choices=("cls", "meanpool"))
    p.add_argument("--seed", type=int, default=0)
    p.add_argument("--out")
    p.set_defaults(func=cmd_finetune)

    p = sub.add_parser("linprobe", help="linear-probe grid over features and learning rates")
    p.add_argument("--base", default="init:desk:0")
    p.add_argument("--delta")
    p.add_argument("--data", required=True)
    p.add_argument("--lrs", default="", help="comma-separated learning rates")
    p.add_argument("--epochs", type=int, default=100)
    p.add_argument("--seed", type=int, default=0)
    p.add_argument("--out")
    p.set_defaults(func=cmd_linprobe)

    p = sub.add_parser("analyze", help="per-block eigenvalue spectra and probes")
    p.add_argument("--base", default="init:desk:0")
    p.add_argument("--delta")
    p.add_argument("--data", required=True)
    p.add_argument("--samples", type=int, default=256)
    p.add_argument("--k", type=int, default=1)
    p.add_argument("--probes", action="store_true")
    p.add_argument("--seed", type=int, default=0)
    p.add_argument("--csv")
    p.add_argument("--dump")
    p.set_defaults(func=cmd_analyze)

    p = sub.add_parser("merge", help="fold a delta into its base; writes a standalone model")
    p.add_argument("--base", required=True)
    p.add_argument("--delta", required=True)
    p.add_argument("--out", required=True)
    p.set_defaults(func=cmd_merge)

    p = sub.add_parser("count-params", help="trainable parameters of a partition (no allocation)")
    p.add_argument("--arch", default="vitl", choices=sorted(ARCHS))
    _partition_flags(p)
    p.set_defaults(func=cmd_count_params)
    for p in sub.choices.values():
        p.add_argument("--config", default=argparse.SUPPRESS, help="JSON config file")
    return top


def _subparsers(top: argparse.ArgumentParser) -> dict[str, argparse.ArgumentParser]:
    for act in top._actions:
        if isinstance(act, argparse._SubParsersAction):
            return dict(act.choices)
    return {}


def _coerce(action: argparse.Action, value):
    if isinstance(action, argparse._StoreTrueAction):
        return value if isinstance(value, bool) else str(value).strip().lower() in ("1", "true", "yes", "on")
    if isinstance(value, str) and action.type is not None:
        try:
            return action.type(value)
        except ValueError as e:
            raise UsageError(f"bad value {value!r} for {action.dest}") from e
    return value


def layered_defaults(sub: argparse.ArgumentParser, command: str, file_cfg: dict, environ) -> dict:
    """Defaults for ``sub`` from the config file, then overridden by ``EXPLORA_*`` variables."""
    flat = {k: v for k, v in file_cfg.items() if not isinstance(v, dict)}
    flat.update(file_cfg.get(command, {}) or {})
    flat = {k.replace("-", "_"): v for k, v in flat.items()}
    out = {}
    for act in sub._actions:
        if act.dest in ("help", "config"):
            continue
        if act.dest in flat:
            out[act.dest] = _coerce(act, flat[act.dest])
        env = environ.get(ENV_PREFIX + act.dest.upper())
        if env is not None:
            out[act.dest] = _coerce(act, env)
    return out


def parse(argv, environ=None) -> argparse.Namespace:
    environ = os.environ if environ is None else environ
    top = build_parser()
    # first pass only finds the subcommand and config file; required flags may come from file/env
    required = {}
    for name, sub in _subparsers(top).items():
        required[name] = [a for a in sub._actions if a.required]
        for a in required[name]:
            a.required = False
    first = top.parse_args(argv)
    if not first.command:
        raise UsageError(top.format_usage().strip())
    file_cfg = {}
    config = getattr(first, "config", None)
    if config:
        try:
            file_cfg = json.loads(Path(config).read_text())
        except FileNotFoundError as e:
            raise UsageError(f"config file not found: {config}") from e
        except json.JSONDecodeError as e:
            raise UsageError(f"config file {config} is not valid JSON: {e}") from e
    sub = _subparsers(top)[first.command]
    defaults = layered_defaults(sub, first.command, file_cfg, environ)
    # flags satisfied by the file or environment are no longer required on the command line
    for act in required[first.command]:
        act.required = act.dest not in defaults
    sub.set_defaults(**defaults)
    return top.parse_args(argv)


def _set_threads(environ) -> None:
    n = environ.get(ENV_PREFIX + "THREADS")
    if n:
        from threadpoolctl import threadpool_limits
        threadpool_limits(int(n))


def main(argv=None, environ=None) -> int:
    environ = os.environ if environ is None else environ
    argv = sys.argv[1:] if argv is None else list(argv)
    try:
        args = parse(argv, environ)
        logging.basicConfig(level=logging.INFO if args.verbose else logging.WARNING,
                            format="%(levelname)s %(name)s: %(message)s")
        _set_threads(environ)
        return args.func(args)
    except UsageError as e:
        print(f"usage error: {e}", file=sys.stderr)
        return EXIT_USAGE
    except NumericError as e:
        print(f"numeric failure: {e}", file=sys.stderr)
        return EXIT_NUMERIC
    except (CompatibilityError, archive.ArchiveError, OSError, StateError) as e:
        print(f"data error: {e}", file=sys.stderr)
        return EXIT_DATA
    except ContractError as e:
        print(f"usage error: {e}", file=sys.stderr)
        return EXIT_USAGE
    except ValueError as e:                     # DataError and friends
        print(f"data error: {e}", file=sys.stderr)
        return EXIT_DATA


if __name__ == "__main__":
    sys.exit(main())
