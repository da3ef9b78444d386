"""Per-block spectra and probes for a desk model, and the blocks they suggest unfreezing.

    python scripts/block_analysis.py --model source.expl --domain target_spectral --k 2

Without ``--model`` a source model is pre-trained first (a few minutes on one core)
and written to ``--save-model`` if given.
"""

import argparse
import logging

import numpy as np

from explora.analysis import block_spectra, class_probe, dump_features, position_probe, recommend_unfreeze
from explora.data import SyntheticDomainSpec, generate, to_float
from explora.experiments import TransferConfig, make_domains, train_source
from explora.train import load_model, save_model


def main():
    ap = argparse.ArgumentParser(description=__doc__, formatter_class=argparse.RawDescriptionHelpFormatter)
    ap.add_argument("--model", help="standalone model archive; trained from scratch when omitted")
    ap.add_argument("--save-model")
    ap.add_argument("--domain", default="target_spectral")
    ap.add_argument("--samples", type=int, default=200)
    ap.add_argument("--k", type=int, default=1)
    ap.add_argument("--seed", type=int, default=0)
    args = ap.parse_args()
    logging.basicConfig(level=logging.INFO, format="%(asctime)s %(message)s")

    if args.model:
        model = load_model(args.model)
    else:
        cfg = TransferConfig()
        model = train_source(cfg, make_domains(cfg))
        if args.save_model:
            save_model(args.save_model, model)

    x, y = generate(SyntheticDomainSpec(domain=args.domain), args.samples, stream=99)
    dump = dump_features(model, to_float(x), dataset_id=args.domain)
    rep = block_spectra(dump)
    print(rep.table())
    print("\nblock  position  class")
    for b in range(1, dump.depth + 1):
        print(f"{b:>5}  {position_probe(dump, b, args.seed):.3f}     {class_probe(dump, b, y, args.seed):.3f}")
    print(f"\nlowest mean eigenvalue -> unfreeze {recommend_unfreeze(rep, args.k)}"
          f"  (mean eigenvalues: {np.round(rep.mean, 4).tolist()})")


if __name__ == "__main__":
    main()
