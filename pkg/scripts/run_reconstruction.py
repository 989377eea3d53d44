"""DLG and CPL against undefended updates on the 4-layer CNN.

Writes report.csv, summary.json and reconstruction strips for each attack
under ``--output`` and prints attack success rate and mean SSIM.
"""

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
    for name in ("reconstruction_dlg", "reconstruction_cpl"):
        out = run_experiment(config(name, args.output), args.workers)
        g = json.loads((out / "summary.json").read_text())["groups"][0]
        print(f"{name}: ASR {g['asr']:.2f}  SSIM {g['ssim_mean']:.3f} +- {g['ssim_std']:.3f}  "
              f"MSE {g['mse_mean']:.4f}  ({g['runs']} images) -> {out}")


if __name__ == "__main__":
    main()
