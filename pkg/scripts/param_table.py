"""Parameter counts per connection pattern, base width and bridge method."""

import argparse

from ddunet.topology import BRIDGE_METHODS, PATTERNS, TopologySpec, count_parameters_spec


def main():
    ap = argparse.ArgumentParser(description=__doc__)
    ap.add_argument("--stages", type=int, default=4)
    ap.add_argument("--bases", type=int, nargs="+", default=[32, 64])
    args = ap.parse_args()
    print("pattern\tbase\t" + "\t".join(BRIDGE_METHODS))
    for pattern in PATTERNS:
        for base in args.bases:
            counts = [
                count_parameters_spec(TopologySpec(pattern, stages=args.stages, base_channels=base, bridge_method=m))
                for m in BRIDGE_METHODS
            ]
            print(f"{pattern}\t{base}\t" + "\t".join(str(c) for c in counts))


if __name__ == "__main__":
    main()
