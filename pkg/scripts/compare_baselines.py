"""Train the full model and the parameter-matched baselines on the same synthetic split."""

import argparse

from _common import add_corpus_args, corpus_and_config
from turntake.baselines import resolve_width
from turntake.training import EvalReport, train


def main():
    p = argparse.ArgumentParser(description=__doc__)
    add_corpus_args(p)
    p.add_argument("--archs", default="ctt,ef_lstm,lf_lstm,mult")
    args = p.parse_args()
    _, batch, cfg = corpus_and_config(args)
    print(f"{'arch':<10}{'params':>10}{'accuracy':>10}{'macro-F1':>10}")
    for arch in args.archs.split(","):
        c = resolve_width(cfg.replace(arch=arch))
        params, history = train(batch, c, epochs=args.epochs)
        r = EvalReport.from_dict(history[-1]["eval"])
        print(f"{arch:<10}{params.count():>10,}{r.accuracy:>10.4f}{r.macro_f1:>10.4f}")


if __name__ == "__main__":
    main()
