"""Focal-loss training, Adam, evaluation metrics and the ablation harness."""

from __future__ import annotations

import json
import logging
import time
from dataclasses import asdict, dataclass, field
from typing import Callable, Mapping

import numpy as np

from . import numcore as nc
from .config import ABLATION_ROWS, ABLATIONS, ModelConfig
from .dataio import Batch, fit_minmax, scale_batch, split_train_test
from .fusion import build_model, forward_batch, predict_proba
from .numcore import Tensor
from .params import ModelParams

log = logging.getLogger(__name__)

P_MIN = 1e-7
POSITIVE = 0  # label of the turn-taking event


class TrainingError(ValueError):
    pass


# ----------------------------------------------------------------------------
# loss


def focal_terms(p: Tensor, y: np.ndarray, alpha: float, gamma: float) -> Tensor:
    """Per-sample focal loss; ``p`` is the probability of the positive (event) class."""
    y = np.asarray(y)
    pos = (y == POSITIVE).astype(p.dtype)
    sign = 2.0 * pos - 1.0  # p_t = p for positives, 1 - p otherwise
    pc = nc.clip(p, P_MIN, 1.0 - P_MIN)
    p_t = nc.add(nc.mul(pc, sign), (1.0 - pos))
    a_t = alpha * pos + (1.0 - alpha) * (1.0 - pos)
    weight = nc.pow_scalar(nc.sub(1.0, p_t), gamma)
    return nc.mul(nc.mul(weight, nc.log(p_t)), -a_t)


def focal_loss(p: Tensor | np.ndarray, y: np.ndarray, alpha: float = 0.3, gamma: float = 2.0) -> Tensor:
    if not isinstance(p, Tensor):
        p = Tensor(np.asarray(p, np.float64))
    if not 0 < alpha < 1 or gamma < 0:
        raise ValueError(f"need 0 < alpha < 1 and gamma >= 0 (alpha={alpha}, gamma={gamma})")
    return nc.reduce_mean(focal_terms(p, y, alpha, gamma))


# ----------------------------------------------------------------------------
# metrics


def _safe_div(a: float, b: float) -> tuple[float, bool]:
    return (a / b, False) if b > 0 else (0.0, True)


@dataclass(frozen=True)
class EvalReport:
    tp: int
    fp: int
    fn: int
    tn: int
    accuracy: float
    macro_f1: float
    precision: float
    recall: float
    f1_class0: float
    f1_class1: float
    precision_class0: float
    precision_class1: float
    recall_class0: float
    recall_class1: float
    # names of per-class quantities that were 0/0 and reported as 0
    undefined: tuple[str, ...] = ()

    @property
    def n(self) -> int:
        return self.tp + self.fp + self.fn + self.tn

    @classmethod
    def from_confusion(cls, tp: int, fp: int, fn: int, tn: int) -> "EvalReport":
        n = tp + fp + fn + tn
        if n == 0:
            raise TrainingError("cannot evaluate an empty dataset")
        undefined = []

        def per_class(tp_, fp_, fn_, tag):
            p, up = _safe_div(tp_, tp_ + fp_)
            r, ur = _safe_div(tp_, tp_ + fn_)
            f, uf = _safe_div(2 * tp_, 2 * tp_ + fp_ + fn_)
            for flag, name in ((up, "precision"), (ur, "recall"), (uf, "f1")):
                if flag:
                    undefined.append(f"{name}_{tag}")
            return p, r, f

        p0, r0, f0 = per_class(tp, fp, fn, "class0")
        p1, r1, f1 = per_class(tn, fn, fp, "class1")
        return cls(tp, fp, fn, tn, (tp + tn) / n, (f0 + f1) / 2, (p0 + p1) / 2, (r0 + r1) / 2,
                   f0, f1, p0, p1, r0, r1, tuple(undefined))

    @classmethod
    def from_predictions(cls, y_true: np.ndarray, y_pred: np.ndarray) -> "EvalReport":
        y_true, y_pred = np.asarray(y_true), np.asarray(y_pred)
        if y_true.shape != y_pred.shape:
            raise ValueError("prediction and label counts differ")
        pos_t, pos_p = y_true == POSITIVE, y_pred == POSITIVE
        return cls.from_confusion(int(np.sum(pos_t & pos_p)), int(np.sum(~pos_t & pos_p)),
                                  int(np.sum(pos_t & ~pos_p)), int(np.sum(~pos_t & ~pos_p)))

    def to_dict(self) -> dict:
        d = asdict(self)
        d["undefined"] = list(self.undefined)
        return d

    def to_json(self) -> str:
        return json.dumps(self.to_dict(), sort_keys=True)

    @classmethod
    def from_dict(cls, d: Mapping) -> "EvalReport":
        d = dict(d)
        d["undefined"] = tuple(d.get("undefined", ()))
        return cls(**d)

    def table(self) -> str:
        rows = [("accuracy", self.accuracy), ("macro_f1", self.macro_f1), ("precision", self.precision),
                ("recall", self.recall), ("f1_class0", self.f1_class0), ("f1_class1", self.f1_class1)]
        lines = [f"{k:<10} {v:.4f}" for k, v in rows]
        lines.append(f"confusion  tp={self.tp} fp={self.fp} fn={self.fn} tn={self.tn}")
        if self.undefined:
            lines.append("undefined  " + ",".join(self.undefined))
        return "\n".join(lines)


def decide(p: np.ndarray, threshold: float = 0.5) -> np.ndarray:
    """Labels from event probabilities: 0 iff p > threshold (a tie is class1)."""
    return np.where(np.asarray(p) > threshold, 0, 1)


def evaluate(params: ModelParams, dataset: Batch, threshold: float | None = None) -> EvalReport:
    if len(dataset) == 0:
        raise TrainingError("cannot evaluate an empty dataset")
    th = params.config.threshold if threshold is None else threshold
    return EvalReport.from_predictions(dataset.label, decide(predict_proba(params, dataset), th))


# ----------------------------------------------------------------------------
# optimizer


@dataclass
class TrainState:
    params: ModelParams
    m: dict[str, np.ndarray]
    v: dict[str, np.ndarray]
    step: int = 0
    epoch: int = 0
    history: list[dict] = field(default_factory=list)
    rng_state: dict = field(default_factory=dict)

    @classmethod
    def fresh(cls, params: ModelParams) -> "TrainState":
        zeros = {k: np.zeros_like(a) for k, a in params.arrays.items()}
        return cls(params, zeros, {k: np.zeros_like(a) for k, a in params.arrays.items()})

    def save(self, path) -> int:
        from .quantserve import save_model
        extra = {f"adam.m.{k}": a for k, a in self.m.items()}
        extra.update({f"adam.v.{k}": a for k, a in self.v.items()})
        meta = {"step": self.step, "epoch": self.epoch, "history": self.history, "rng": self.rng_state}
        return save_model(path, self.params, extra, meta)

    @classmethod
    def load(cls, path) -> "TrainState":
        from .quantserve import load_model_with_extras
        params, other, meta = load_model_with_extras(path)
        m = {k[len("adam.m."):]: a.copy() for k, a in other.items() if k.startswith("adam.m.")}
        v = {k[len("adam.v."):]: a.copy() for k, a in other.items() if k.startswith("adam.v.")}
        if set(m) != set(params.arrays) or set(v) != set(params.arrays):
            raise TrainingError(f"{path}: optimizer moments do not match the weights")
        params = params.with_arrays({k: a.copy() for k, a in params.arrays.items()})
        return cls(params, m, v, meta["step"], meta["epoch"], meta["history"], meta["rng"])


def adam_step(state: TrainState, grads: Mapping[str, np.ndarray], lr: float = 5e-5,
              beta1: float = 0.9, beta2: float = 0.999, eps: float = 1e-8) -> TrainState:
    """Bias-corrected Adam; parameters without a gradient are left alone."""
    for k, g in grads.items():
        if k not in state.params.arrays:
            raise TrainingError(f"gradient for unknown parameter {k!r}")
        if g.shape != state.params.arrays[k].shape:
            raise TrainingError(f"gradient for {k} has shape {g.shape}, parameter is "
                                f"{state.params.arrays[k].shape}")
    state.step += 1
    t = state.step
    c1 = 1.0 - beta1 ** t
    c2 = 1.0 - beta2 ** t
    for k, g in grads.items():
        w, m, v = state.params.arrays[k], state.m[k], state.v[k]
        m *= beta1
        m += (1.0 - beta1) * g
        v *= beta2
        v += (1.0 - beta2) * (g * g)
        w -= (lr * (m / c1) / (np.sqrt(v / c2) + eps)).astype(w.dtype)
    return state


# ----------------------------------------------------------------------------
# loop


def train_step(state: TrainState, batch: Batch, cfg: ModelConfig, rng: np.random.Generator,
               touched: set | None = None) -> float:
    P = state.params.tensors(requires_grad=True)
    p = forward_batch(P, batch, cfg, training=True, rng=rng)
    loss = focal_loss(p, batch.label, cfg.focal_alpha, cfg.focal_gamma)
    nc.backward(loss)
    if touched is not None:
        touched |= P.touched
    grads = {k: t.grad for k, t in P.items() if t.grad is not None}
    adam_step(state, grads, cfg.lr)
    return float(loss.data)


def train(dataset: Batch, config: ModelConfig, ablation: str | None = None, *,
          eval_data: Batch | None = None, train_fraction: float = 0.8, epochs: int | None = None,
          state: TrainState | None = None, on_epoch: Callable[[TrainState], None] | None = None,
          audit: set | None = None) -> tuple[ModelParams, list[dict]]:
    """Train on raw (unscaled) windows and return the fitted params and per-epoch history.

    Without ``eval_data`` the last ``1 - train_fraction`` of the windows is held out.
    Passing a ``state`` resumes from a checkpoint.
    """
    if len(dataset) == 0:
        raise TrainingError("empty dataset")
    cfg = config if ablation is None else config.replace(ablation=ablation)
    if eval_data is None:
        tr_idx, te_idx = split_train_test(len(dataset), train_fraction)
        train_raw = dataset.take(tr_idx, dense=False)
        eval_raw = dataset.take(te_idx, dense=False) if len(te_idx) else None
    else:
        train_raw, eval_raw = dataset, eval_data
    if len(train_raw) == 0:
        raise TrainingError("no training windows after the split")
    for m in cfg.modalities:
        shape = train_raw.modality(m).shape[1:]
        if shape != (cfg.seq_len(m), cfg.in_dim(m)):
            raise TrainingError(f"ablation {cfg.ablation} needs {m} windows of "
                                f"{(cfg.seq_len(m), cfg.in_dim(m))}, dataset has {shape}")
    epochs = cfg.epochs if epochs is None else epochs

    if state is None:
        params = build_model(cfg, seed=cfg.seed)
        params.extras = fit_minmax(train_raw)
        state = TrainState.fresh(params)
        order_rng = np.random.default_rng([cfg.seed, 101])
        drop_rng = np.random.default_rng([cfg.seed, 202])
    else:
        # The epoch budget may grow on resume; everything else must match the checkpoint.
        if state.params.config.replace(epochs=cfg.epochs) != cfg:
            raise TrainingError("checkpoint was written under a different config")
        state.params.config = cfg
        order_rng = np.random.default_rng()
        order_rng.bit_generator.state = state.rng_state["order"]
        drop_rng = np.random.default_rng()
        drop_rng.bit_generator.state = state.rng_state["dropout"]
    train_set = scale_batch(train_raw, state.params.extras)

    n = len(train_set)
    while state.epoch < epochs:
        t0 = time.perf_counter()
        perm = order_rng.permutation(n)
        losses = []
        for lo in range(0, n, cfg.batch_size):
            mb = train_set.take(perm[lo:lo + cfg.batch_size])
            losses.append(train_step(state, mb, cfg, drop_rng, audit) * len(mb))
        state.epoch += 1
        rec = {"epoch": state.epoch, "train_loss": float(np.sum(losses) / n),
               "seconds": round(time.perf_counter() - t0, 3)}
        if eval_raw is not None and len(eval_raw):
            rec["eval"] = evaluate(state.params, eval_raw).to_dict()
        state.history.append(rec)
        state.rng_state = {"order": order_rng.bit_generator.state, "dropout": drop_rng.bit_generator.state}
        log.info("epoch %d loss %.5f%s", state.epoch, rec["train_loss"],
                 f" macro_f1 {rec['eval']['macro_f1']:.4f}" if "eval" in rec else "")
        if on_epoch is not None:
            on_epoch(state)
    return state.params, state.history


def smoothed(values: list[float], window: int = 5) -> np.ndarray:
    v = np.asarray(values, float)
    if len(v) < window:
        return v
    return np.convolve(v, np.ones(window) / window, mode="valid")


# ----------------------------------------------------------------------------
# ablations


def ablate(dataset: Batch, config: ModelConfig, epochs: int | None = None,
           modes: tuple[str, ...] | None = None, eval_data: Batch | None = None,
           train_fraction: float = 0.8) -> dict[str, dict]:
    """Train and evaluate every ablation on one split; rows keyed by mode."""
    rows = {}
    for mode in modes or tuple(ABLATION_ROWS):
        touched: set = set()
        params, history = train(dataset, config, mode, eval_data=eval_data, epochs=epochs,
                                train_fraction=train_fraction, audit=touched)
        if eval_data is None:
            _, te = split_train_test(len(dataset), train_fraction)
            held = dataset.take(te, dense=False)
        else:
            held = eval_data
        report = evaluate(params, held)
        rows[mode] = {"mode": mode, "row": ABLATION_ROWS[mode], "report": report,
                      "modalities": ABLATIONS[mode][0], "targets": ABLATIONS[mode][1],
                      "touched": sorted(touched), "params": params.count()}
    return rows


def ablation_table(rows: Mapping[str, dict]) -> str:
    lines = [f"{'row':<22} {'acc':>6} {'macroF1':>8} {'prec':>6} {'rec':>6}"]
    for mode in ABLATION_ROWS:
        if mode not in rows:
            continue
        r = rows[mode]["report"]
        lines.append(f"{ABLATION_ROWS[mode]:<22} {r.accuracy:6.3f} {r.macro_f1:8.3f} "
                     f"{r.precision:6.3f} {r.recall:6.3f}")
    return "\n".join(lines)
