"""Full neck ablation on the toy scene: all four variants, five replicates each.

Usage: python3 scripts/run_ablation.py [--out runs/ablation] [--replicates 5] [--variants FPN,HRFPN,PANET,MHFPN]
"""

import argparse
import logging
import time
from pathlib import Path

from mhfpn import ablation
from mhfpn.config import parse_config

TOY = """
data.n_images = 300
data.split = holdout
data.n_train = 200
data.n_val = 50
data.n_test = 50
"""


def main() -> None:
    ap = argparse.ArgumentParser(description=__doc__.splitlines()[0])
    ap.add_argument("--out", default="runs/ablation")
    ap.add_argument("--replicates", type=int, default=ablation.REPLICATES)
    ap.add_argument("--variants", default=",".join(ablation.ABLATION_ORDER))
    args = ap.parse_args()
    logging.basicConfig(level=logging.INFO, format="%(asctime)s %(message)s")

    out = Path(args.out)
    out.mkdir(parents=True, exist_ok=True)
    variants = tuple(args.variants.split(","))
    t0 = time.perf_counter()
    res = ablation.run_ablation(
        parse_config(TOY), variants, args.replicates,
        on_replicate=lambda v, r, row: logging.info("%s r%d AP@50 %.4f AP@50S %s", v, r, row["AP@50"], row["AP@50S"]),
    )
    (out / "ablation.csv").write_text(ablation.summary_csv(res))
    (out / "ablation_max.csv").write_text(ablation.max_csv(res))
    (out / "ablation_raw.csv").write_text(ablation.raw_csv(res))
    print(ablation.summary_csv(res))
    if "FPN" in variants and "MHFPN" in variants:
        print("MHFPN >= FPN (median):", ablation.ordering_holds(res))
    print(f"elapsed {time.perf_counter() - t0:.0f}s")


if __name__ == "__main__":
    main()
