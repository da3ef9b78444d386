"""Desk-scale source -> target transfer: source pre-training, then ExPLoRA vs LoRA-only.

    python scripts/run_transfer.py --seeds 0 1 2 3 4 --out results/transfer.json

Prints the frozen source-weights probe on both domains and, per seed, the target
probe accuracy after ExPLoRA (last block unfrozen + rank-r Q/V LoRA elsewhere)
and after LoRA-only extended pre-training with the same rank and iteration budget.
"""

import argparse
import json
import logging
from dataclasses import asdict, fields
from pathlib import Path

from explora.experiments import TransferConfig, run_transfer


def main():
    ap = argparse.ArgumentParser(description=__doc__, formatter_class=argparse.RawDescriptionHelpFormatter)
    ap.add_argument("--seeds", type=int, nargs="+", default=[0, 1, 2, 3, 4])
    ap.add_argument("--out", type=Path)
    for f in fields(TransferConfig):
        if f.type in ("int", "float", "str"):
            ap.add_argument(f"--{f.name.replace('_', '-')}", type={"int": int, "float": float, "str": str}[f.type])
    args = ap.parse_args()
    logging.basicConfig(level=logging.INFO, format="%(asctime)s %(message)s")

    overrides = {f.name: getattr(args, f.name) for f in fields(TransferConfig)
                 if getattr(args, f.name, None) is not None}
    cfg = TransferConfig(**overrides)
    res = run_transfer(cfg, seeds=tuple(args.seeds))

    src, tgt = res["source_on_source"], res["source_on_target"]
    print(f"\nsource weights, linear probe: source {src:.3f}  target {tgt:.3f}  (gap {100 * (src - tgt):.1f} pts)")
    print("seed  explora  lora_only  explora-source")
    for r in res["seeds"]:
        print(f"{r['seed']:>4}  {r['explora']:.3f}    {r['lora_only']:.3f}      {100 * (r['explora'] - tgt):+.1f}")
    print(f"({res['seconds']:.0f}s)")
    if args.out:
        args.out.parent.mkdir(parents=True, exist_ok=True)
        args.out.write_text(json.dumps({"config": asdict(cfg), **res}, indent=2) + "\n")


if __name__ == "__main__":
    main()
