"""Adam training loop, evaluation metrics, and confidence filtering."""

from __future__ import annotations

import hashlib
import itertools
import json
from dataclasses import asdict, dataclass, field, replace

import numpy as np

from . import autodiff as ad
from .autodiff import Tensor
from .corpus import LABELS, EncodedCase
from .embedding import ConfigError
from .model import ModelParams, Prediction, forward_graph, init_params, predict


class TrainingDivergedError(RuntimeError):
    """Loss became non-finite during training."""


class EmptyRetainedError(ValueError):
    """A confidence threshold discarded every prediction."""


def derive_seed(root: int, label: str) -> int:
    """Stable per-subsystem seed split from one root seed."""
    digest = hashlib.sha256(f"{root}:{label}".encode()).digest()
    return int.from_bytes(digest[:8], "little")


@dataclass(frozen=True)
class HyperParams:
    """Optimization knobs."""

    lr: float = 0.001
    epochs: int = 5
    batch_size: int = 64
    weight_decay: float = 1e-4
    beta1: float = 0.9
    beta2: float = 0.999
    eps: float = 1e-8

    def validate(self) -> None:
        if self.lr < 0 or self.epochs < 1 or self.batch_size < 1:
            raise ConfigError("lr must be >= 0, epochs and batch_size >= 1")
        if self.weight_decay < 0 or self.eps <= 0:
            raise ConfigError("weight_decay must be >= 0 and eps > 0")
        if not (0 <= self.beta1 < 1 and 0 <= self.beta2 < 1):
            raise ConfigError("betas must be in [0, 1)")

    def to_dict(self) -> dict:
        return asdict(self)

    @classmethod
    def from_dict(cls, d: dict) -> "HyperParams":
        known = set(cls.__dataclass_fields__)
        unknown = set(d) - known
        if unknown:
            raise ConfigError(f"unknown hyperparameter fields: {sorted(unknown)}")
        hp = cls(**d)
        hp.validate()
        return hp


class AdamState:
    """First and second moment buffers, one pair per parameter."""

    def __init__(self, params: list[Tensor]):
        self.m = [np.zeros_like(p.data) for p in params]
        self.v = [np.zeros_like(p.data) for p in params]
        self.t = 0


def adam_step(params: list[Tensor], state: AdamState, hyper: HyperParams) -> None:
    """Bias-corrected Adam update with decoupled weight decay.

    The decay term joins the update directly rather than entering the
    moment estimates. Rows listed in a tensor's ``frozen_rows`` (the
    padding embedding row) never move.
    """
    state.t += 1
    t = state.t
    for i, p in enumerate(params):
        g = p.grad if p.grad is not None else np.zeros_like(p.data)
        if p.frozen_rows:
            g = g.copy()
            for r in p.frozen_rows:
                g[r] = 0.0
        state.m[i] = hyper.beta1 * state.m[i] + (1 - hyper.beta1) * g
        state.v[i] = hyper.beta2 * state.v[i] + (1 - hyper.beta2) * g * g
        m_hat = state.m[i] / (1 - hyper.beta1**t)
        v_hat = state.v[i] / (1 - hyper.beta2**t)
        update = m_hat / (np.sqrt(v_hat) + hyper.eps) + hyper.weight_decay * p.data
        if p.frozen_rows:
            for r in p.frozen_rows:
                update[r] = 0.0
        p.data -= hyper.lr * update


@dataclass
class EpochStats:
    train_loss: float
    val_loss: float
    val_macro_f1: float


@dataclass
class TrainHistory:
    epochs: list[EpochStats] = field(default_factory=list)


def _case_loss(
    params: ModelParams,
    case: EncodedCase,
    train_mode: bool,
    rng: np.random.Generator | None,
) -> Tensor:
    probs, _ = forward_graph(params, case.ids, case.demographics, train_mode, rng)
    return ad.cross_entropy(probs, case.label)


def train(
    params: ModelParams,
    train_set: list[EncodedCase],
    val_set: list[EncodedCase],
    hyper: HyperParams,
    seed: int = 0,
) -> TrainHistory:
    """Minibatch Adam training, deterministic in ``seed``.

    The root seed splits into independent shuffle and dropout streams.
    Raises TrainingDivergedError the moment a batch loss stops being
    finite.
    """
    hyper.validate()
    if not train_set or not val_set:
        raise ConfigError("train and validation sets must be nonempty")
    shuffle_rng = np.random.default_rng(derive_seed(seed, "shuffle"))
    dropout_rng = np.random.default_rng(derive_seed(seed, "dropout"))
    tensors = [t for _, t in params.parameters()]
    state = AdamState(tensors)
    history = TrainHistory()

    for epoch in range(hyper.epochs):
        order = shuffle_rng.permutation(len(train_set))
        total_loss = 0.0
        for start in range(0, len(order), hyper.batch_size):
            batch = [train_set[i] for i in order[start : start + hyper.batch_size]]
            losses = [_case_loss(params, c, True, dropout_rng) for c in batch]
            batch_loss = ad.scale(ad.add_n(losses), 1.0 / len(losses))
            value = batch_loss.item()
            if not np.isfinite(value):
                raise TrainingDivergedError(
                    f"non-finite loss at epoch {epoch + 1}, step {start // hyper.batch_size}"
                )
            params.zero_grad()
            batch_loss.backward()
            adam_step(tensors, state, hyper)
            total_loss += value * len(batch)

        val_loss = float(
            np.mean([_case_loss(params, c, False, None).item() for c in val_set])
        )
        val_metrics = evaluate(params, val_set)
        history.epochs.append(
            EpochStats(
                train_loss=total_loss / len(train_set),
                val_loss=val_loss,
                val_macro_f1=val_metrics.macro_f1,
            )
        )
    return history


# -- metrics -----------------------------------------------------------------


@dataclass
class ClassMetrics:
    precision: float
    recall: float
    f1: float
    support: int


@dataclass
class Metrics:
    """Per-class precision/recall/F1 with confusion counts.

    ``confusion[i][j]`` counts true class i predicted as j. Precision
    is 0 when a class receives no predictions; recall is 0 when a class
    has no support, and such classes are listed in
    ``zero_support_classes``.
    """

    per_class: dict[str, ClassMetrics]
    confusion: list[list[int]]
    accuracy: float
    macro_f1: float
    retained_fraction: float = 1.0
    zero_support_classes: list[str] = field(default_factory=list)

    def to_dict(self) -> dict:
        return {
            "per_class": {c: asdict(m) for c, m in self.per_class.items()},
            "confusion": self.confusion,
            "accuracy": self.accuracy,
            "macro_f1": self.macro_f1,
            "retained_fraction": self.retained_fraction,
            "zero_support_classes": self.zero_support_classes,
        }


def metrics_from(
    true_labels: list[int],
    predicted: list[int],
    class_names: tuple[str, ...] = LABELS,
    retained_fraction: float = 1.0,
) -> Metrics:
    if len(true_labels) != len(predicted):
        raise ConfigError("label and prediction counts differ")
    if not true_labels:
        raise EmptyRetainedError("cannot compute metrics over zero cases")
    n = len(class_names)
    confusion = np.zeros((n, n), dtype=np.int64)
    for t, p in zip(true_labels, predicted):
        confusion[t][p] += 1

    per_class: dict[str, ClassMetrics] = {}
    zero_support = []
    f1s = []
    for i, name in enumerate(class_names):
        support = int(confusion[i].sum())
        predicted_as = int(confusion[:, i].sum())
        tp = int(confusion[i][i])
        precision = tp / predicted_as if predicted_as else 0.0
        recall = tp / support if support else 0.0
        if not support:
            zero_support.append(name)
        f1 = 2 * precision * recall / (precision + recall) if precision + recall else 0.0
        per_class[name] = ClassMetrics(precision, recall, f1, support)
        f1s.append(f1)

    return Metrics(
        per_class=per_class,
        confusion=confusion.tolist(),
        accuracy=float(np.trace(confusion) / confusion.sum()),
        macro_f1=float(np.mean(f1s)),
        retained_fraction=retained_fraction,
        zero_support_classes=zero_support,
    )


def predict_all(params: ModelParams, cases: list[EncodedCase]) -> list[Prediction]:
    return [predict(params, c) for c in cases]


def confidence_filter(
    predictions: list[Prediction], threshold: float
) -> tuple[list[int], float]:
    """Indices of predictions whose max probability clears the threshold.

    Returns (kept indices, discarded fraction). Raises when everything
    is discarded; a threshold below 1/3 cannot discard a 3-class
    softmax output, so the valid range is [1/3, 1).
    """
    if not 1.0 / 3.0 <= threshold < 1.0:
        raise ConfigError(f"threshold must be in [1/3, 1), got {threshold}")
    kept = [i for i, p in enumerate(predictions) if float(p.probs.max()) >= threshold]
    if not kept:
        raise EmptyRetainedError(f"threshold {threshold} discarded all predictions")
    return kept, 1.0 - len(kept) / len(predictions)


def evaluate(
    params: ModelParams,
    cases: list[EncodedCase],
    threshold: float | None = None,
) -> Metrics:
    """Inference metrics over a dataset, optionally confidence-filtered."""
    if not cases:
        raise ConfigError("evaluation set must be nonempty")
    preds = predict_all(params, cases)
    if threshold is None:
        return metrics_from([c.label for c in cases], [p.predicted for p in preds])
    kept, discarded = confidence_filter(preds, threshold)
    return metrics_from(
        [cases[i].label for i in kept],
        [preds[i].predicted for i in kept],
        retained_fraction=1.0 - discarded,
    )


def render_metrics_table(rows: list[tuple[str, Metrics]], class_names=LABELS) -> str:
    """Fixed-width table: P/R/F per class (percent), accuracy, retention."""
    label_w = max(12, *(len(name) for name, _ in rows)) if rows else 12
    header = "".join(f"  P({c[:4]})  R({c[:4]})  F({c[:4]})" for c in class_names)
    lines = [f"{'':<{label_w}}{header}     acc  kept"]
    for name, m in rows:
        cells = ""
        for c in class_names:
            cm = m.per_class[c]
            cells += f"  {cm.precision * 100:7.1f}  {cm.recall * 100:7.1f}  {cm.f1 * 100:7.1f}"
        lines.append(
            f"{name:<{label_w}}{cells}  {m.accuracy * 100:6.1f}  {m.retained_fraction * 100:5.1f}%"
        )
    return "\n".join(lines)


# -- grid search ---------------------------------------------------------------


def grid_search(
    config,
    train_set: list[EncodedCase],
    val_set: list[EncodedCase],
    base_hyper: HyperParams,
    grid: dict[str, list],
    seed: int = 0,
) -> list[dict]:
    """Exhaustive sweep; returns one row per combination, best first.

    Grid keys name HyperParams fields, plus "dropout" which lands on
    the model config. Every combination trains from a fresh init with
    the same seed.
    """
    if not grid:
        raise ConfigError("grid must name at least one hyperparameter")
    hyper_fields = set(HyperParams.__dataclass_fields__)
    for key in grid:
        if key != "dropout" and key not in hyper_fields:
            raise ConfigError(f"unknown grid key {key!r}")

    results = []
    keys = sorted(grid)
    for values in itertools.product(*(grid[k] for k in keys)):
        combo = dict(zip(keys, values))
        cfg = config
        if "dropout" in combo:
            cfg = replace(cfg, dropout=combo["dropout"])
        hyper = HyperParams.from_dict(
            {**base_hyper.to_dict(), **{k: v for k, v in combo.items() if k != "dropout"}}
        )
        params = init_params(cfg, seed=derive_seed(seed, "init"))
        history = train(params, train_set, val_set, hyper, seed=seed)
        results.append(
            {
                "combo": combo,
                "val_macro_f1": history.epochs[-1].val_macro_f1,
                "val_loss": history.epochs[-1].val_loss,
            }
        )
    results.sort(key=lambda r: (-r["val_macro_f1"], json.dumps(r["combo"], sort_keys=True)))
    return results
