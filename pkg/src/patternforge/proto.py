"""Class prototypes and the loss family built around them.

A prototype is the running mean embedding of a class. Distances from
embeddings to prototypes define a softmax distribution over classes, which
feeds a negative-log-likelihood loss when labels are known and an entropy
loss when they are not. The refiner objective combines a prediction term,
a prototype term and a change-size regularizer.
"""

from __future__ import annotations

from dataclasses import dataclass

import numpy as np

from .tensor import Tensor, TensorError, accumulate_grad, log_softmax, record_op, take_per_row

TARGETED = "targeted"
NON_TARGETED = "non-targeted"
MODES = (TARGETED, NON_TARGETED)


@dataclass(frozen=True)
class LossWeights:
    """Trade-off coefficients for the combined objectives.

    ``lam`` weights the prototype loss while training the classifier,
    ``alpha`` the change regularizer and ``beta`` the prototype loss while
    training the refiner. ``p_norm`` selects the regularization norm.
    """

    lam: float = 1.0
    alpha: float = 0.1
    beta: float = 0.3
    p_norm: int = 1

    def __post_init__(self):
        if min(self.lam, self.alpha, self.beta) < 0:
            raise ValueError("loss weights must be non-negative")
        if self.p_norm not in (1, 2):
            raise ValueError("p_norm must be 1 or 2")


class PrototypeSet:
    """One embedding-space centre per class, stored as an (l, m) constant."""

    def __init__(self, prototypes):
        arr = prototypes.data if isinstance(prototypes, Tensor) else np.asarray(
            prototypes, dtype=np.float64)
        if arr.ndim != 2:
            raise ValueError("prototypes must be (classes, embedding_dim)")
        if not np.all(np.isfinite(arr)):
            raise ValueError("prototypes must be finite")
        self.prototypes = Tensor(arr.copy())

    @property
    def class_count(self) -> int:
        return self.prototypes.shape[0]

    @property
    def embedding_dim(self) -> int:
        return self.prototypes.shape[1]

    def as_array(self) -> np.ndarray:
        return self.prototypes.data.copy()


def init_prototypes(class_count: int, embedding_dim: int, seed: int) -> PrototypeSet:
    """Small random prototypes: 0.01-scaled standard normal draws."""
    rng = np.random.default_rng(seed)
    return PrototypeSet(0.01 * rng.standard_normal((class_count, embedding_dim)))


def compute_prototypes(embeddings, labels) -> PrototypeSet:
    """Per-class arithmetic mean of embeddings; every class must appear."""
    emb = embeddings.data if isinstance(embeddings, Tensor) else np.asarray(embeddings)
    y = np.asarray(labels, dtype=np.intp)
    if emb.ndim != 2 or y.shape != (emb.shape[0],):
        raise ValueError("expected (n, m) embeddings and n labels")
    class_count = int(y.max()) + 1 if y.size else 0
    protos = np.zeros((class_count, emb.shape[1]))
    for k in range(class_count):
        mask = y == k
        if not mask.any():
            raise ValueError(f"class {k} has no samples")
        protos[k] = emb[mask].mean(axis=0)
    return PrototypeSet(protos)


def update_prototypes(prev: PrototypeSet, batch_embeddings, batch_labels,
                      per_class_count: int, denominators=None) -> PrototypeSet:
    """Blend the previous prototypes with a balanced batch.

    New prototype k is (previous_k + sum of the class-k batch embeddings)
    divided by ``per_class_count + 1``, i.e. the mean of the batch
    embeddings and the previous prototype taken together. ``denominators``
    overrides the divisor per class for the variant that divides by the full
    per-class dataset size plus one.
    """
    emb = (batch_embeddings.data if isinstance(batch_embeddings, Tensor)
           else np.asarray(batch_embeddings))
    y = np.asarray(batch_labels, dtype=np.intp)
    counts = np.bincount(y, minlength=prev.class_count)
    if not np.all(counts == per_class_count):
        raise ValueError(
            f"unbalanced batch: class counts {counts.tolist()}, "
            f"expected {per_class_count} each")
    if denominators is None:
        denominators = np.full(prev.class_count, per_class_count + 1, dtype=np.float64)
    else:
        denominators = np.asarray(denominators, dtype=np.float64)
    new = np.empty_like(prev.prototypes.data)
    for k in range(prev.class_count):
        new[k] = (prev.prototypes.data[k] + emb[y == k].sum(axis=0)) / denominators[k]
    return PrototypeSet(new)


def sq_distances(embeddings: Tensor, protos: PrototypeSet) -> Tensor:
    """Squared Euclidean distance from each embedding to each prototype."""
    c = protos.prototypes
    if embeddings.data.ndim != 2 or embeddings.data.shape[1] != c.data.shape[1]:
        raise TensorError(
            f"sq_distances: embeddings {embeddings.data.shape} do not match "
            f"prototypes {c.data.shape}")
    delta = embeddings.data[:, None, :] - c.data[None, :, :]  # (n, l, m)
    out = np.einsum("nkm,nkm->nk", delta, delta)

    def bwd(g, e=embeddings, c=c, delta=delta):
        accumulate_grad(e, 2.0 * np.einsum("nk,nkm->nm", g, delta))
        accumulate_grad(c, -2.0 * np.einsum("nk,nkm->km", g, delta))

    return record_op(out, (embeddings, c), bwd, op="sq_distances")


def _distance_log_probs(embeddings: Tensor, protos: PrototypeSet) -> Tensor:
    return log_softmax(-sq_distances(embeddings, protos))


def proto_nll_loss(embeddings: Tensor, protos: PrototypeSet, labels) -> Tensor:
    """Mean negative log-likelihood of the distance softmax at the true class."""
    logp = _distance_log_probs(embeddings, protos)
    return (-take_per_row(logp, labels)).mean()


def proto_entropy_loss(embeddings: Tensor, protos: PrototypeSet) -> Tensor:
    """Mean entropy of the distance softmax (natural log)."""
    if protos.class_count < 2:
        raise TensorError("entropy needs at least 2 classes")
    logp = _distance_log_probs(embeddings, protos)
    return (-(logp.exp() * logp).sum(axis=1)).mean()


def cross_entropy_loss(logits: Tensor, labels) -> Tensor:
    """Mean negative log-softmax of the logits at the true class."""
    return (-take_per_row(log_softmax(logits), labels)).mean()


def prediction_entropy_loss(logits: Tensor) -> Tensor:
    """Mean entropy of the classifier softmax (natural log)."""
    logp = log_softmax(logits)
    return (-(logp.exp() * logp).sum(axis=1)).mean()


def reg_loss(refined: Tensor, raw: Tensor, p_norm: int = 1) -> Tensor:
    """Mean per-sample p-norm of the change the refiner made."""
    if refined.data.shape != raw.data.shape:
        raise TensorError(
            f"reg_loss: shape mismatch {refined.data.shape} vs {raw.data.shape}")
    if p_norm not in (1, 2):
        raise ValueError("p_norm must be 1 or 2")
    diff = refined - raw
    if p_norm == 1:
        per_sample = diff.abs().sum(axis=1)
    else:
        per_sample = diff.square().sum(axis=1).sqrt()
    return per_sample.mean()


def refiner_loss(refined: Tensor, raw: Tensor, embeddings: Tensor, logits: Tensor,
                 protos: PrototypeSet, labels, weights: LossWeights, mode: str,
                 use_pred: bool = True, use_proto: bool = True) -> Tensor:
    """Combined refiner objective: prediction + alpha*change + beta*prototype.

    Targeted mode scores against labels; non-targeted mode substitutes the
    entropy of each softmax. The ``use_*`` switches exist for ablations.
    """
    if mode not in MODES:
        raise ValueError(f"mode must be one of {MODES}")
    if mode == TARGETED and labels is None:
        raise ValueError("targeted mode requires labels")
    total = weights.alpha * reg_loss(refined, raw, weights.p_norm)
    if use_pred:
        if mode == TARGETED:
            total = total + cross_entropy_loss(logits, labels)
        else:
            total = total + prediction_entropy_loss(logits)
    if use_proto:
        if mode == TARGETED:
            total = total + weights.beta * proto_nll_loss(embeddings, protos, labels)
        else:
            total = total + weights.beta * proto_entropy_loss(embeddings, protos)
    return total
