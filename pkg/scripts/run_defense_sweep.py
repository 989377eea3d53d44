"""DLG under Laplace noise of increasing scale; prints the sweep table."""

import argparse

from gradleak.experiment import read_report, run_experiment, summarize

from _common import config, setup_logging


def main():
    ap = argparse.ArgumentParser(description=__doc__)
    ap.add_argument("--output", default="runs")
    ap.add_argument("--workers", type=int, default=None)
    ap.add_argument("--seeds", type=int, nargs="+", default=None,
                    help="noise seeds; each adds one run per image and scale")
    args = ap.parse_args()
    setup_logging()
    out = run_experiment(config("defense_sweep", args.output, args.seeds), args.workers)
    print(f"{'kind':>8} {'scale':>8} {'runs':>5} {'ASR':>5} {'SSIM':>7} {'MSE':>8}")
    for g in summarize(read_report(out / "report.csv")):
        print(f"{g['noise_kind']:>8} {g['noise_scale']:8.0e} {g['runs']:5d} {g['asr']:5.2f} "
              f"{g['ssim_mean']:7.3f} {g['mse_mean']:8.4f}")
    print(f"results in {out}")


if __name__ == "__main__":
    main()
