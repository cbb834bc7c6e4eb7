"""Parameter and FLOP counts for each neck variant on the default detector.

Usage: python3 scripts/cost_table.py [--side 64]
"""

import argparse
import dataclasses

from mhfpn.ablation import ABLATION_ORDER
from mhfpn.config import load_config
from mhfpn.cost import count_flops, count_params
from mhfpn.train import build_model


def main() -> None:
    ap = argparse.ArgumentParser(description=__doc__.splitlines()[0])
    ap.add_argument("--side", type=int, default=64)
    args = ap.parse_args()
    base = load_config(None)
    print("variant,params,neck_params,flops")
    for v in ABLATION_ORDER:
        cfg = dataclasses.replace(base, neck=dataclasses.replace(base.neck, variant=v))
        m = build_model(cfg)
        print(f"{v},{count_params(m)},{count_params(m.neck)},{count_flops(m, (1, 1, args.side, args.side))}")


if __name__ == "__main__":
    main()
