"""CLI: dump penultimate classifier features for a dataset split into FCFT."""

from __future__ import annotations

import argparse
import sys

from .extract import ExtractJob, extract_features


def main(argv=None) -> int:
    parser = argparse.ArgumentParser(
        prog="fcft-extract",
        description="Write penultimate-layer activations of a frozen classifier "
                    "into an FCFT feature file")
    parser.add_argument("--model", choices=["resnet18", "wrn-40-2"], required=True)
    parser.add_argument("--weights", default=None, help="classifier state-dict path")
    parser.add_argument("--dataset", required=True,
                        help="cifar10 | cifar100 | svhn")
    parser.add_argument("--split", choices=["train", "test"], default="test")
    parser.add_argument("--out", required=True, help="output .fcft path")
    parser.add_argument("--data-root", default="./data")
    parser.add_argument("--batch-size", type=int, default=256)
    parser.add_argument("--device", default="cpu")
    parser.add_argument("--norm", default="cifar10", choices=["cifar10", "cifar100", "none"],
                        help="normalization recipe the classifier was trained with")
    parser.add_argument("--num-classes", type=int, default=None,
                        help="classifier head width (default: dataset standard)")
    parser.add_argument("--ood", action="store_true",
                        help="force sentinel labels (default: inferred from dataset)")
    args = parser.parse_args(argv)
    job = ExtractJob(model=args.model, weights=args.weights, dataset=args.dataset,
                     split=args.split, out=args.out, data_root=args.data_root,
                     batch_size=args.batch_size, device=args.device, norm=args.norm,
                     num_classes=args.num_classes, as_ood=args.ood or None)
    path = extract_features(job)
    print(f"wrote {path}")
    return 0


if __name__ == "__main__":
    sys.exit(main())
