"""GradInv on the residual net, before and after a few epochs of training."""

import argparse
import json

from gradleak.experiment import run_experiment

from _common import config, setup_logging


def main():
    ap = argparse.ArgumentParser(description=__doc__)
    ap.add_argument("--output", default="runs")
    ap.add_argument("--workers", type=int, default=None)
    args = ap.parse_args()
    setup_logging()
    means = {}
    for name in ("gradinv_untrained", "gradinv_trained"):
        out = run_experiment(config(name, args.output), args.workers)
        g = json.loads((out / "summary.json").read_text())["groups"][0]
        means[name] = g["ssim_mean"]
        print(f"{name}: SSIM {g['ssim_mean']:.3f} +- {g['ssim_std']:.3f}  ASR {g['asr']:.2f}"
              f"  ({g['runs']} images) -> {out}")
    diff = means["gradinv_trained"] - means["gradinv_untrained"]
    print(f"trained minus untrained mean SSIM: {diff:+.3f}")


if __name__ == "__main__":
    main()
