"""Contrastive losses with analytic gradients.

Implements the bidirectional InfoNCE loss, the two soft-alignment target
constructions (swapped prediction and forward bootstrapping), and the
partitioned progressive self-distillation objective. Each loss returns its
value together with exact partial derivatives with respect to both embedding
matrices and the learnable log inverse-temperature.

Gradient convention: embeddings are treated as free variables (the losses are
smooth functions of the raw matrix entries), so every gradient can be checked
coordinate-wise against central finite differences. Soft targets are plain
arrays and never receive gradient.
"""

from __future__ import annotations

import math
from dataclasses import dataclass

import numpy as np

from .errors import EmptyBatchError, InvalidInputError
from .numkit import as_matrix, softmax_rows

MAX_LOGIT_SCALE = 100.0

DEFAULT_INIT_TEMPERATURE = 0.07


@dataclass(frozen=True)
class TemperatureParam:
    """Learnable log inverse-temperature: logit scale = exp(log_scale) = 1/tau."""

    log_scale: float

    @property
    def scale(self) -> float:
        return math.exp(self.log_scale)

    @classmethod
    def from_temperature(cls, tau: float) -> "TemperatureParam":
        if not (math.isfinite(tau) and tau > 0.0):
            raise InvalidInputError(f"temperature must be a positive real, got {tau}")
        return cls(log_scale=math.log(1.0 / tau))


def clamp_scale(temp: TemperatureParam) -> TemperatureParam:
    """Cap the logit scale at 100; values at or below are untouched."""
    limit = math.log(MAX_LOGIT_SCALE)
    if temp.log_scale > limit:
        return TemperatureParam(log_scale=limit)
    return temp


@dataclass(frozen=True)
class EmbeddingBatch:
    """Paired image/text embedding matrices, one row per pair.

    Shape and finiteness are enforced here; unit row norms are the encoder's
    postcondition (finite-difference probes legitimately evaluate the losses
    at slightly off-unit points).
    """

    image: np.ndarray
    text: np.ndarray

    def __post_init__(self):
        v = as_matrix(self.image, "image embeddings")
        t = as_matrix(self.text, "text embeddings")
        if v.shape != t.shape:
            raise InvalidInputError(f"embedding shape mismatch: image {v.shape} vs text {t.shape}")
        object.__setattr__(self, "image", v)
        object.__setattr__(self, "text", t)

    @property
    def n(self) -> int:
        return self.image.shape[0]

    @property
    def dim(self) -> int:
        return self.image.shape[1]


@dataclass(frozen=True)
class PartitionPlan:
    """Disjoint split of batch rows into aligned (hard-target) and unaligned
    (soft-target) subsets, plus the mixing coefficient alpha.

    Index arrays are kept sorted ascending. make_partition guarantees
    len(aligned_idx) == floor(alpha * n); hand-built plans may decouple alpha
    from the split, which the affine-in-alpha property relies on.
    """

    aligned_idx: np.ndarray
    unaligned_idx: np.ndarray
    alpha: float

    def __post_init__(self):
        a = np.sort(np.asarray(self.aligned_idx, dtype=np.int64))
        u = np.sort(np.asarray(self.unaligned_idx, dtype=np.int64))
        n = a.size + u.size
        merged = np.concatenate([a, u])
        merged.sort()
        if n == 0 or not np.array_equal(merged, np.arange(n, dtype=np.int64)):
            raise InvalidInputError("aligned and unaligned indices must disjointly cover 0..N-1")
        if not (0.0 <= self.alpha <= 1.0):
            raise InvalidInputError(f"alpha must lie in [0, 1], got {self.alpha}")
        object.__setattr__(self, "aligned_idx", a)
        object.__setattr__(self, "unaligned_idx", u)

    @property
    def n(self) -> int:
        return self.aligned_idx.size + self.unaligned_idx.size

    @property
    def n_aligned(self) -> int:
        return self.aligned_idx.size

    @property
    def n_unaligned(self) -> int:
        return self.unaligned_idx.size


@dataclass(frozen=True)
class SoftTargets:
    """Teacher-produced alignment distributions for the unaligned subset.

    Row u of each matrix is the target distribution for batch row
    unaligned_idx[u]: image_targets rows are distributions over the batch's
    texts, text_targets rows over its images. Targets are constants to the
    student; no gradient flows into them.
    """

    image_targets: np.ndarray
    text_targets: np.ndarray
    teacher_scale: float

    def __post_init__(self):
        a_v = np.ascontiguousarray(self.image_targets, dtype=np.float64)
        a_t = np.ascontiguousarray(self.text_targets, dtype=np.float64)
        for name, m in (("image_targets", a_v), ("text_targets", a_t)):
            if m.ndim != 2:
                raise InvalidInputError(f"{name} must be 2-D")
            if m.size and (m.min() < -1e-12 or m.max() > 1.0 + 1e-12):
                raise InvalidInputError(f"{name} entries must lie in [0, 1]")
            if m.shape[0] and np.abs(m.sum(axis=1) - 1.0).max() > 1e-9:
                raise InvalidInputError(f"{name} rows must sum to 1 within 1e-9")
        if a_v.shape != a_t.shape:
            raise InvalidInputError("image_targets and text_targets must share a shape")
        if not (math.isfinite(self.teacher_scale) and self.teacher_scale > 0.0):
            raise InvalidInputError(f"teacher scale must be positive, got {self.teacher_scale}")
        object.__setattr__(self, "image_targets", a_v)
        object.__setattr__(self, "text_targets", a_t)


@dataclass
class LossGrad:
    """Loss value with gradients for both embedding matrices and log-scale."""

    loss: float
    d_image: np.ndarray
    d_text: np.ndarray
    d_log_scale: float


def _ce_softmax_term(queries: np.ndarray, keys: np.ndarray, scale: float,
                     targets: np.ndarray) -> tuple[float, np.ndarray, np.ndarray, float]:
    """One cross-entropy term H(targets, softmax_rows(scale * queries @ keys.T)).

    Mean reduction over the query rows. Returns (loss, d_queries, d_keys,
    d_scale); gradients flow through both operands of the similarity product
    (numerators and denominators alike) but not through targets.
    """
    rows = queries.shape[0]
    if rows == 0:
        return 0.0, np.zeros_like(queries), np.zeros_like(keys), 0.0
    sims = queries @ keys.T
    probs = softmax_rows(sims, scale)
    loss = float(-(targets * np.log(np.maximum(probs, 1e-300))).sum() / rows)
    d_logits = (probs - targets) / rows
    d_queries = scale * (d_logits @ keys)
    d_keys = scale * (d_logits.T @ queries)
    d_scale = float((d_logits * sims).sum())
    return loss, d_queries, d_keys, d_scale


def _one_hot_rows(row_targets: np.ndarray, n_cols: int) -> np.ndarray:
    out = np.zeros((row_targets.size, n_cols))
    out[np.arange(row_targets.size), row_targets] = 1.0
    return out


def info_nce(batch: EmbeddingBatch, temp: TemperatureParam) -> LossGrad:
    """Bidirectional InfoNCE: row-wise cross entropy against the identity
    pairing, image-to-text plus text-to-image, each with mean reduction."""
    if batch.n == 0:
        raise EmptyBatchError("info_nce requires at least one pair")
    v, t = batch.image, batch.text
    scale = temp.scale
    eye = np.eye(batch.n)
    loss_v, d_v1, d_t1, d_s1 = _ce_softmax_term(v, t, scale, eye)
    loss_t, d_t2, d_v2, d_s2 = _ce_softmax_term(t, v, scale, eye)
    return LossGrad(
        loss=loss_v + loss_t,
        d_image=d_v1 + d_v2,
        d_text=d_t1 + d_t2,
        d_log_scale=(d_s1 + d_s2) * scale,
    )


def _check_teacher(teacher_image, teacher_text, teacher_scale, plan):
    v = as_matrix(teacher_image, "teacher image embeddings")
    t = as_matrix(teacher_text, "teacher text embeddings")
    if v.shape != t.shape:
        raise InvalidInputError("teacher matrices must share a shape")
    if v.shape[0] != plan.n:
        raise InvalidInputError(
            f"teacher matrices cover {v.shape[0]} rows but plan covers {plan.n}")
    if not (math.isfinite(teacher_scale) and teacher_scale > 0.0):
        raise InvalidInputError(f"teacher scale must be positive, got {teacher_scale}")
    return v, t


def soft_targets_swapped(teacher_image, teacher_text, teacher_scale: float,
                         plan: PartitionPlan) -> SoftTargets:
    """Swapped-prediction targets from the opposite modality's posterior.

    The alignment of image i to text j is the probability that text j matches
    image i against all other images (and symmetrically for texts), i.e. the
    transpose of the row-softmaxed opposite-direction similarity matrix. The
    transposed rows are renormalized to sum to 1 so they feed a
    proper-distribution cross entropy.
    """
    v, t = _check_teacher(teacher_image, teacher_text, teacher_scale, plan)
    u = plan.unaligned_idx
    n = plan.n
    if u.size == 0:
        empty = np.zeros((0, n))
        return SoftTargets(empty, empty.copy(), teacher_scale)
    sims = v @ t.T
    # [i, j] = P(image i | text j): softmax over images for each text.
    image_given_text = softmax_rows(sims.T, teacher_scale).T
    # [i, j] = P(text i | image j): softmax over texts for each image.
    text_given_image = softmax_rows(sims, teacher_scale).T
    a_v = image_given_text[u]
    a_t = text_given_image[u]
    a_v = a_v / a_v.sum(axis=1, keepdims=True)
    a_t = a_t / a_t.sum(axis=1, keepdims=True)
    return SoftTargets(a_v, a_t, teacher_scale)


def soft_targets_bootstrap(teacher_image, teacher_text, teacher_scale: float,
                           plan: PartitionPlan) -> SoftTargets:
    """Forward-bootstrapping targets: each row's own same-direction posterior.

    Rows of the row-softmaxed similarity matrices are already stochastic, so
    no renormalization is applied.
    """
    v, t = _check_teacher(teacher_image, teacher_text, teacher_scale, plan)
    u = plan.unaligned_idx
    n = plan.n
    if u.size == 0:
        empty = np.zeros((0, n))
        return SoftTargets(empty, empty.copy(), teacher_scale)
    sims = v @ t.T
    a_v = softmax_rows(sims, teacher_scale)[u]
    a_t = softmax_rows(sims.T, teacher_scale)[u]
    return SoftTargets(a_v, a_t, teacher_scale)


def psd_loss(batch: EmbeddingBatch, temp: TemperatureParam, plan: PartitionPlan,
             targets: SoftTargets) -> LossGrad:
    """Partitioned self-distillation objective.

    alpha * [hard InfoNCE terms over the aligned rows, each contrasted against
    the full batch] + (1 - alpha) * [soft cross-entropy terms over the
    unaligned rows against the teacher targets]. Mean reduction is taken
    separately per subset; an empty subset contributes exactly 0. Gradients
    flow through every student embedding inside the softmaxes and through the
    log-scale, never through the targets.
    """
    if batch.n == 0:
        raise EmptyBatchError("psd_loss requires at least one pair")
    if plan.n != batch.n:
        raise InvalidInputError(f"plan covers {plan.n} rows but batch has {batch.n}")
    if targets.image_targets.shape != (plan.n_unaligned, batch.n):
        raise InvalidInputError(
            f"targets shape {targets.image_targets.shape} does not match "
            f"(unaligned={plan.n_unaligned}, batch={batch.n})")
    v, t = batch.image, batch.text
    scale = temp.scale
    alpha = plan.alpha
    a_idx, u_idx = plan.aligned_idx, plan.unaligned_idx

    d_image = np.zeros_like(v)
    d_text = np.zeros_like(t)
    loss = 0.0
    d_scale = 0.0

    if a_idx.size:
        hard = _one_hot_rows(a_idx, batch.n)
        l1, dq1, dk1, ds1 = _ce_softmax_term(v[a_idx], t, scale, hard)
        l2, dq2, dk2, ds2 = _ce_softmax_term(t[a_idx], v, scale, hard)
        loss += alpha * (l1 + l2)
        d_image[a_idx] += alpha * dq1
        d_text += alpha * dk1
        d_text[a_idx] += alpha * dq2
        d_image += alpha * dk2
        d_scale += alpha * (ds1 + ds2)

    if u_idx.size:
        l3, dq3, dk3, ds3 = _ce_softmax_term(v[u_idx], t, scale, targets.image_targets)
        l4, dq4, dk4, ds4 = _ce_softmax_term(t[u_idx], v, scale, targets.text_targets)
        loss += (1.0 - alpha) * (l3 + l4)
        d_image[u_idx] += (1.0 - alpha) * dq3
        d_text += (1.0 - alpha) * dk3
        d_text[u_idx] += (1.0 - alpha) * dq4
        d_image += (1.0 - alpha) * dk4
        d_scale += (1.0 - alpha) * (ds3 + ds4)

    return LossGrad(loss=loss, d_image=d_image, d_text=d_text,
                    d_log_scale=d_scale * scale)
