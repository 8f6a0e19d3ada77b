"""Revenue-vs-CTR frontier: trained models against GSP and uGSP grids.

Usage: python scripts/pareto_sweep.py [config] [out_dir]
"""

import sys

from gsplab import cli


def main(config="configs/default.ini", out="out/pareto"):
    return cli.main(["pareto", "--config", config, "--seed", "3",
                     "--out", out])


if __name__ == "__main__":
    sys.exit(main(*sys.argv[1:]))
