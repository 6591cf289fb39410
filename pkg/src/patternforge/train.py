"""Optimizers and the two training loops.

The classifier loop draws class-balanced batches from the clean dataset and
minimizes cross-entropy plus a weighted prototype loss, updating the running
prototypes after every step. The refiner loop then freezes the classifier
and prototypes entirely and trains only the refiner, with gradients flowing
through the frozen network into the refiner parameters.
"""

from __future__ import annotations

import os
from dataclasses import dataclass, field

import numpy as np

from . import nn
from .data import ROLE_IDEAL, ROLE_IMPERFECT, PatternDataset
from .proto import (LossWeights, MODES, PrototypeSet, TARGETED,
                    cross_entropy_loss, init_prototypes, prediction_entropy_loss,
                    proto_entropy_loss, proto_nll_loss, refiner_loss, reg_loss,
                    update_prototypes)
from .tensor import Tensor, backward, no_grad


@dataclass(frozen=True)
class TrainConfig:
    """Knobs for one training run; every default is overridable."""

    epochs: int = 50
    batches_per_epoch: int | None = None  # None: cover the dataset once
    per_class_count: int = 8              # samples per class per batch
    optimizer: str = "adam"
    learning_rate: float = 1e-3
    seed: int = 0
    weights: LossWeights = field(default_factory=LossWeights)
    mode: str = TARGETED
    proto_update: str = "stabilized"      # or "literal": divide by |class|+1
    checkpoint_interval: int = 0          # epochs between snapshots; 0 = none

    def __post_init__(self):
        if self.epochs < 0 or self.per_class_count < 1:
            raise ValueError("epoch and batch counts must be positive")
        if self.batches_per_epoch is not None and self.batches_per_epoch < 1:
            raise ValueError("batches_per_epoch must be positive")
        if self.learning_rate <= 0:
            raise ValueError("learning rate must be positive")
        if self.optimizer not in ("adam", "rmsprop"):
            raise ValueError(f"unknown optimizer {self.optimizer!r}")
        if self.mode not in MODES:
            raise ValueError(f"mode must be one of {MODES}")
        if self.proto_update not in ("stabilized", "literal"):
            raise ValueError("proto_update must be 'stabilized' or 'literal'")
        if self.checkpoint_interval < 0:
            raise ValueError("checkpoint_interval must be non-negative")


class Adam:
    """Adam with bias correction: beta1=0.9, beta2=0.999, eps=1e-8."""

    def __init__(self, params: dict[str, Tensor], lr: float = 1e-3,
                 beta1: float = 0.9, beta2: float = 0.999, eps: float = 1e-8):
        self.params = params
        self.lr, self.beta1, self.beta2, self.eps = lr, beta1, beta2, eps
        self.step_count = 0
        self.m = {k: np.zeros_like(p.data) for k, p in params.items()}
        self.v = {k: np.zeros_like(p.data) for k, p in params.items()}

    def step(self) -> None:
        self.step_count += 1
        t = self.step_count
        for name, p in self.params.items():
            g = p.grad
            if g is None:
                raise ValueError(f"parameter {name} has no gradient")
            self.m[name] = self.beta1 * self.m[name] + (1.0 - self.beta1) * g
            self.v[name] = self.beta2 * self.v[name] + (1.0 - self.beta2) * g * g
            m_hat = self.m[name] / (1.0 - self.beta1 ** t)
            v_hat = self.v[name] / (1.0 - self.beta2 ** t)
            p.data -= self.lr * m_hat / (np.sqrt(v_hat) + self.eps)

    def zero_grad(self) -> None:
        for p in self.params.values():
            p.grad = None


class RMSprop:
    """RMSprop with decay 0.9 and eps 1e-8 (no bias correction)."""

    def __init__(self, params: dict[str, Tensor], lr: float = 0.01,
                 decay: float = 0.9, eps: float = 1e-8):
        self.params = params
        self.lr, self.decay, self.eps = lr, decay, eps
        self.step_count = 0
        self.sq = {k: np.zeros_like(p.data) for k, p in params.items()}

    def step(self) -> None:
        self.step_count += 1
        for name, p in self.params.items():
            g = p.grad
            if g is None:
                raise ValueError(f"parameter {name} has no gradient")
            self.sq[name] = self.decay * self.sq[name] + (1.0 - self.decay) * g * g
            p.data -= self.lr * g / (np.sqrt(self.sq[name]) + self.eps)

    def zero_grad(self) -> None:
        for p in self.params.values():
            p.grad = None


def make_optimizer(kind: str, params: dict[str, Tensor], lr: float):
    if kind == "adam":
        return Adam(params, lr=lr)
    if kind == "rmsprop":
        return RMSprop(params, lr=lr)
    raise ValueError(f"unknown optimizer {kind!r}")


def balanced_batch(dataset: PatternDataset, per_class: int, rng,
                   role: str = ROLE_IDEAL):
    """Exactly ``per_class`` samples of every class, in shuffled order.

    Classes smaller than ``per_class`` are sampled with replacement, which is
    how imbalanced data stays balanced inside each batch.
    """
    rows, labels = [], []
    for k in range(dataset.classes):
        members = [i for i in dataset.indices(role)
                   if dataset.patterns[i].label == k]
        if not members:
            raise ValueError(f"class {k} has no {role} samples")
        replace_draw = len(members) < per_class
        chosen = rng.choice(len(members), size=per_class, replace=replace_draw)
        rows += [members[int(j)] for j in chosen]
        labels += [k] * per_class
    order = rng.permutation(len(rows))
    values = np.stack([dataset.patterns[rows[int(j)]].values for j in order])
    return Tensor(values), np.array(labels, dtype=np.intp)[order]


@dataclass
class EpochStats:
    epoch: int
    loss: float
    components: dict[str, float]
    accuracy: float

    def csv_row(self, component_names) -> str:
        parts = [str(self.epoch), str(self.loss)]
        parts += [str(self.components[c]) for c in component_names]
        parts.append(str(self.accuracy))
        return ",".join(parts)


CLASSIFIER_STATS_HEADER = "epoch,loss,loss_ce,loss_proto,accuracy"
REFINER_STATS_HEADER = "epoch,loss,loss_pred,loss_reg,loss_proto,accuracy"


def _class_sizes(dataset: PatternDataset, role: str) -> np.ndarray:
    labels = dataset.labels(role)
    return np.bincount(labels, minlength=dataset.classes)


def train_classifier_epoch(model: nn.Classifier, protos: PrototypeSet,
                           dataset: PatternDataset, config: TrainConfig,
                           optimizer, rng, epoch: int = 0):
    """One pass of balanced batches; returns (new prototypes, stats)."""
    n_ideal = len(dataset.indices(ROLE_IDEAL))
    batch_size = dataset.classes * config.per_class_count
    batches = config.batches_per_epoch or max(1, n_ideal // batch_size)
    lam = config.weights.lam
    denominators = None
    if config.proto_update == "literal":
        denominators = _class_sizes(dataset, ROLE_IDEAL) + 1.0
    loss_sum = ce_sum = proto_sum = 0.0
    hits = total = 0
    for _ in range(batches):
        x, y = balanced_batch(dataset, config.per_class_count, rng)
        emb, logits = model.forward(x)
        ce = cross_entropy_loss(logits, y)
        pl = proto_nll_loss(emb, protos, y)
        loss = ce + lam * pl
        optimizer.zero_grad()
        backward(loss)
        optimizer.step()
        protos = update_prototypes(protos, emb.data, y, config.per_class_count,
                                   denominators=denominators)
        loss_sum += loss.item()
        ce_sum += ce.item()
        proto_sum += pl.item()
        hits += int((logits.data.argmax(axis=1) == y).sum())
        total += y.size
    stats = EpochStats(
        epoch=epoch,
        loss=loss_sum / batches,
        components={"loss_ce": ce_sum / batches, "loss_proto": proto_sum / batches},
        accuracy=hits / total,
    )
    return protos, stats


def train_refiner_epoch(refiner: nn.Refiner, classifier: nn.Classifier,
                        protos: PrototypeSet, dataset: PatternDataset,
                        config: TrainConfig, optimizer, rng, epoch: int = 0,
                        use_pred: bool = True, use_proto: bool = True):
    """One pass of plain shuffled batches over the imperfect patterns.

    The classifier and prototypes must already be frozen; gradients flow
    through them into the refiner parameters only. The ``use_*`` switches
    drop loss terms for ablation runs.
    """
    idx = dataset.indices(ROLE_IMPERFECT)
    if not idx:
        raise ValueError("dataset has no imperfect patterns")
    if refiner.length != classifier.length:
        raise ValueError("refiner and classifier input extents differ")
    batch_size = min(config.per_class_count, len(idx))
    order = rng.permutation(len(idx))
    batches = config.batches_per_epoch or max(1, len(idx) // batch_size)
    w = config.weights
    loss_sum = pred_sum = reg_sum = proto_sum = 0.0
    hits = total = 0
    for b in range(batches):
        take = order[(b * batch_size) % len(idx):][:batch_size]
        if take.size < batch_size:  # wrap around when batches exceed coverage
            take = np.concatenate([take, order[: batch_size - take.size]])
        rows = [idx[int(j)] for j in take]
        x = Tensor(np.stack([dataset.patterns[i].values for i in rows]))
        y = np.array([dataset.patterns[i].label for i in rows], dtype=np.intp)
        refined = refiner.forward(x)
        emb, logits = classifier.forward(refined)
        labels = y if config.mode == TARGETED else None
        loss = refiner_loss(refined, x, emb, logits, protos, labels, w,
                            config.mode, use_pred=use_pred, use_proto=use_proto)
        optimizer.zero_grad()
        backward(loss)
        optimizer.step()
        loss_sum += loss.item()
        # per-term logging, recomputed outside the tape
        reg_sum += reg_loss(Tensor(refined.data), Tensor(x.data), w.p_norm).item()
        if config.mode == TARGETED:
            pred_sum += cross_entropy_loss(Tensor(logits.data), y).item()
            proto_sum += proto_nll_loss(Tensor(emb.data), protos, y).item()
        else:
            pred_sum += prediction_entropy_loss(Tensor(logits.data)).item()
            proto_sum += proto_entropy_loss(Tensor(emb.data), protos).item()
        hits += int((logits.data.argmax(axis=1) == y).sum())
        total += y.size
    stats = EpochStats(
        epoch=epoch,
        loss=loss_sum / batches,
        components={"loss_pred": pred_sum / batches, "loss_reg": reg_sum / batches,
                    "loss_proto": proto_sum / batches},
        accuracy=hits / total,
    )
    return stats


def _append_stats(run_dir, filename, header, stats: EpochStats, names) -> None:
    if run_dir is None:
        return
    path = os.path.join(run_dir, filename)
    new = not os.path.exists(path)
    with open(path, "a") as fh:
        if new:
            fh.write(header + "\n")
        fh.write(stats.csv_row(names) + "\n")


def train_classifier(dataset: PatternDataset, config: TrainConfig,
                     model: nn.Classifier | None = None, run_dir=None):
    """Full classifier training run; returns (model, prototypes, history)."""
    if model is None:
        model = nn.build_classifier(dataset.length, dataset.classes)
        nn.init_parameters(model, config.seed)
    protos = init_prototypes(dataset.classes, model.embed_dim, config.seed)
    optimizer = make_optimizer(config.optimizer, model.params, config.learning_rate)
    rng = np.random.default_rng([config.seed, 5])
    history = []
    for epoch in range(config.epochs):
        protos, stats = train_classifier_epoch(
            model, protos, dataset, config, optimizer, rng, epoch=epoch)
        history.append(stats)
        _append_stats(run_dir, "stats.csv", CLASSIFIER_STATS_HEADER, stats,
                      ("loss_ce", "loss_proto"))
        if (run_dir and config.checkpoint_interval
                and (epoch + 1) % config.checkpoint_interval == 0):
            nn.save_checkpoint(os.path.join(run_dir, f"classifier_epoch{epoch + 1}.pfck"),
                               model, extra={"prototypes": protos.prototypes.data})
    return model, protos, history


def train_refiner(classifier: nn.Classifier, protos: PrototypeSet,
                  dataset: PatternDataset, config: TrainConfig,
                  refiner: nn.Refiner | None = None, run_dir=None,
                  use_pred: bool = True, use_proto: bool = True):
    """Full refiner training run against a frozen classifier.

    Restores the classifier's trainability flags afterwards; its parameter
    values and the prototypes are never touched.
    """
    if refiner is None:
        refiner = nn.build_refiner(dataset.length)
        nn.init_parameters(refiner, config.seed)
    optimizer = make_optimizer(config.optimizer, refiner.params, config.learning_rate)
    rng = np.random.default_rng([config.seed, 6])
    flags = {name: p.requires_grad for name, p in classifier.params.items()}
    nn.freeze(classifier)
    protos.prototypes.requires_grad = False
    history = []
    try:
        for epoch in range(config.epochs):
            stats = train_refiner_epoch(refiner, classifier, protos, dataset,
                                        config, optimizer, rng, epoch=epoch,
                                        use_pred=use_pred, use_proto=use_proto)
            history.append(stats)
            _append_stats(run_dir, "stats.csv", REFINER_STATS_HEADER, stats,
                          ("loss_pred", "loss_reg", "loss_proto"))
            if (run_dir and config.checkpoint_interval
                    and (epoch + 1) % config.checkpoint_interval == 0):
                nn.save_checkpoint(
                    os.path.join(run_dir, f"refiner_epoch{epoch + 1}.pfck"), refiner)
    finally:
        for name, p in classifier.params.items():
            p.requires_grad = flags[name]
    return refiner, history


@dataclass(frozen=True)
class AblationRow:
    use_proto: bool
    use_pred: bool
    use_reg: bool
    accuracy: float


@dataclass(frozen=True)
class AblationReport:
    rows: tuple[AblationRow, ...]

    def csv_text(self) -> str:
        lines = ["loss_proto,loss_pred,loss_reg,accuracy"]
        for r in self.rows:
            flags = ["Y" if f else "N" for f in (r.use_proto, r.use_pred, r.use_reg)]
            lines.append(",".join(flags + [str(r.accuracy)]))
        return "\n".join(lines) + "\n"


def run_ablation(classifier: nn.Classifier, protos: PrototypeSet,
                 train_set: PatternDataset, test_set: PatternDataset,
                 config: TrainConfig) -> AblationReport:
    """Train one refiner per loss combination and compare refined accuracy.

    Rows: prototype+regularizer, prediction+regularizer, then all three,
    each starting from the same seed and seeing the same data.
    """
    from .metrics import accuracy as measure_accuracy

    combos = ((True, False), (False, True), (True, True))  # (use_proto, use_pred)
    rows = []
    for use_proto, use_pred in combos:
        refiner, _ = train_refiner(classifier, protos, train_set, config,
                                   use_pred=use_pred, use_proto=use_proto)
        with no_grad():
            refined = refiner.forward(Tensor(test_set.values(ROLE_IMPERFECT)))
        acc = measure_accuracy(classifier, protos, refined.data,
                               test_set.labels(ROLE_IMPERFECT))
        rows.append(AblationRow(use_proto, use_pred, True, acc))
    return AblationReport(tuple(rows))
