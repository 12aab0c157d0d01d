import logging

from turntake.config import ModelConfig
from turntake.dataio import make_windows
from turntake.synth import SynthSpec, synth_generate

REDUCED = dict(d=16, bilstm_width=32, transformer_hidden=64, n_layers=2, n_heads=4)


def add_corpus_args(p):
    p.add_argument("--duration", type=float, default=5400.0, help="synthetic session length in seconds")
    p.add_argument("--seed", type=int, default=0)
    p.add_argument("--epochs", type=int, default=30)
    p.add_argument("--full-widths", action="store_true", help="use the default widths instead of reduced ones")
    p.add_argument("-v", "--verbose", action="store_true")


def corpus_and_config(args):
    logging.basicConfig(level=logging.INFO if args.verbose else logging.WARNING, format="%(message)s")
    corpus = synth_generate(SynthSpec(duration=args.duration, seed=args.seed))
    batch, _ = make_windows(corpus.frames, corpus.log, corpus.labels, compact=True)
    cfg = ModelConfig(seed=args.seed) if args.full_widths else ModelConfig(**REDUCED, seed=args.seed)
    return corpus, batch, cfg
