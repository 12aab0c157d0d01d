"""Train the full model on a synthetic corpus and compare with the majority and planted-cue oracle."""

import argparse
import time

import numpy as np

from _common import add_corpus_args, corpus_and_config
from turntake.dataio import split_train_test
from turntake.synth import oracle_predict
from turntake.training import EvalReport, smoothed, train


def main():
    p = argparse.ArgumentParser(description=__doc__)
    add_corpus_args(p)
    args = p.parse_args()
    corpus, batch, cfg = corpus_and_config(args)
    _, te = split_train_test(len(batch))
    test = batch.take(te, dense=False)
    print(f"{len(batch)} windows, class1 share {np.mean(batch.label == 1):.4f}")
    t0 = time.perf_counter()
    _, history = train(batch, cfg, epochs=args.epochs)
    for h in history:
        print(f"epoch {h['epoch']:>2}  loss {h['train_loss']:.5f}  macro-F1 {h['eval']['macro_f1']:.4f}")
    losses = smoothed([h["train_loss"] for h in history])
    print(f"smoothed loss non-increasing: {bool(np.all(np.diff(losses) <= 0))}")
    majority = EvalReport.from_predictions(test.label, np.ones(len(test), int)).macro_f1
    oracle = EvalReport.from_predictions(test.label, oracle_predict(test, corpus.spec)).macro_f1
    print(f"majority {majority:.4f}  oracle {oracle:.4f}  model {history[-1]['eval']['macro_f1']:.4f}  "
          f"({(time.perf_counter() - t0) / 60:.1f} min)")


if __name__ == "__main__":
    main()
