"""Tolerance sweep: advertiser utility vs platform objective trade-off.

Usage: python scripts/transition_sweep.py [config] [out_dir]
"""

import sys

from gsplab import cli


def main(config="configs/default.ini", out="out/transition"):
    return cli.main(["transition", "--config", config, "--seed", "3",
                     "--out", out])


if __name__ == "__main__":
    sys.exit(main(*sys.argv[1:]))
