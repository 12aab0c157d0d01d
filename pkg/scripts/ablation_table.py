"""Run every ablation row on a synthetic corpus and print the table."""

import argparse
import json

from _common import add_corpus_args, corpus_and_config
from turntake.training import ablate, ablation_table


def main():
    p = argparse.ArgumentParser(description=__doc__)
    add_corpus_args(p)
    p.add_argument("--modes", default=None, help="comma-separated subset of ablation modes")
    p.add_argument("--out", default=None, help="write the table as JSON")
    args = p.parse_args()
    _, batch, cfg = corpus_and_config(args)
    rows = ablate(batch, cfg, epochs=args.epochs, modes=tuple(args.modes.split(",")) if args.modes else None)
    print(ablation_table(rows))
    if args.out:
        with open(args.out, "w") as fh:
            json.dump([{"mode": r["mode"], "row": r["row"], **r["report"].to_dict()} for r in rows.values()], fh,
                      indent=1)


if __name__ == "__main__":
    main()
