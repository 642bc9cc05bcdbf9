"""
Training objectives for cross-modal speaker-embedding alignment.

Covers the weight-shared additive-margin classification, teacher similarity
construction and fusion, relational (similarity-table) distillation, the
temperature-scaled contrastive alignment, the stage-1 composite and the
text-prompt alignment objective. Each loss returns its scalar value together
with analytic gradients w.r.t. its embedding inputs.

All embeddings are expected on the unit sphere, so cosine similarity between
them is their inner product; gradients are those of the inner-product form.
"""

import logging
from dataclasses import dataclass
from enum import Enum
from typing import Dict, Optional, Sequence

import numpy as np

from .config import LossConfig
from .errors import ContractError, DegenerateInputError, DomainError, ShapeError
from .numerics import cosine_matrix, logsumexp, masked_softmax

NORM_TOL = 1e-6


class Ablation(str, Enum):
    FULL = "full"
    NO_CE = "no-ce"
    NO_KD = "no-kd"
    NO_CL = "no-cl"


@dataclass(frozen=True)
class ClassifierWeights:
    """Shared class-weight matrix W (d x c), one unit-norm column per speaker."""

    W: np.ndarray

    @classmethod
    def init(cls, dim: int, n_classes: int, rng: np.random.Generator) -> "ClassifierWeights":
        return cls(_unit_columns(rng.normal(size=(dim, n_classes))))

    @property
    def n_classes(self) -> int:
        return self.W.shape[1]

    def renormalized(self, W: Optional[np.ndarray] = None) -> "ClassifierWeights":
        return ClassifierWeights(_unit_columns(self.W if W is None else W))


def _unit_columns(W: np.ndarray) -> np.ndarray:
    norms = np.linalg.norm(W, axis=0)
    if np.any(norms == 0.0):
        raise DegenerateInputError("classifier column with zero norm")
    return W / norms[None, :]


@dataclass(frozen=True)
class SimilarityMatrix:
    values: np.ndarray
    source: str

    @property
    def n(self) -> int:
        return self.values.shape[0]


@dataclass
class CeResult:
    loss: float
    loss_speech: float
    loss_face: float
    grad_speech: np.ndarray
    grad_face: np.ndarray
    grad_W: np.ndarray


@dataclass
class KdResult:
    loss: float
    grad_face: np.ndarray
    grad_speech: np.ndarray


@dataclass
class ContrastiveResult:
    loss: float
    per_anchor: np.ndarray
    grad_anchors: np.ndarray
    grad_candidates: np.ndarray


@dataclass
class Stage1Result:
    total: float
    ce: float
    kd: float
    cl: float
    grad_face: np.ndarray
    grad_W: np.ndarray


def _check_rows_unit(x: np.ndarray, name: str) -> None:
    norms = np.linalg.norm(x, axis=1)
    if np.any(np.abs(norms - 1.0) > NORM_TOL):
        raise ContractError(f"{name} rows must be unit-norm (max deviation {np.max(np.abs(norms - 1.0)):.3g})")


def _as_batch(x, name: str) -> np.ndarray:
    arr = np.asarray(x, dtype=np.float64)
    if arr.ndim != 2:
        raise ShapeError(f"{name} must be a 2-D batch, got shape {arr.shape}")
    return arr


# ---------------------------------------------------------------------------
# Weight-shared additive-margin classification
# ---------------------------------------------------------------------------


def class_scores(features: np.ndarray, weights: ClassifierWeights, scale: float) -> np.ndarray:
    """Scaled cosine logits s * f^T W, one row per feature, one column per speaker."""
    if scale <= 0:
        raise DomainError(f"logit scale must be positive, got {scale}")
    return scale * (_as_batch(features, "features") @ weights.W)


def am_softmax_loss(features: np.ndarray, labels: Sequence[int], weights: ClassifierWeights,
                    margin: float, scale: float):
    """Mean additive-margin softmax over a batch. Returns (loss, dF, dW)."""
    F = _as_batch(features, "features")
    W = weights.W
    y = np.asarray(labels, dtype=np.int64)
    n, c = F.shape[0], W.shape[1]
    if y.shape != (n,):
        raise ShapeError(f"expected {n} labels, got shape {y.shape}")
    if F.shape[1] != W.shape[0]:
        raise ShapeError(f"feature dim {F.shape[1]} != classifier dim {W.shape[0]}")
    if np.any(y < 0) or np.any(y >= c):
        raise DomainError(f"labels must lie in [0, {c}), got {y.tolist()}")
    _check_rows_unit(F, "features")
    _check_rows_unit(W.T, "classifier columns")

    rows = np.arange(n)
    logits = class_scores(F, weights, scale)
    logits[rows, y] -= scale * margin
    lse = logsumexp(logits, axis=1)
    loss = float(np.mean(lse - logits[rows, y]))

    probs = np.exp(logits - lse[:, None])
    probs[rows, y] -= 1.0
    probs /= n
    return loss, scale * probs @ W.T, scale * F.T @ probs


def shared_weight_ce(speech: np.ndarray, speech_labels: Sequence[int], face: np.ndarray,
                     face_labels: Sequence[int], weights: ClassifierWeights, cfg: LossConfig) -> CeResult:
    """alpha * CE(speech) + CE(face), both through the same W."""
    l1, g1, gw1 = am_softmax_loss(speech, speech_labels, weights, cfg.margin, cfg.scale)
    l2, g2, gw2 = am_softmax_loss(face, face_labels, weights, cfg.margin, cfg.scale)
    return CeResult(
        loss=cfg.alpha * l1 + l2,
        loss_speech=l1,
        loss_face=l2,
        grad_speech=cfg.alpha * g1,
        grad_face=g2,
        grad_W=cfg.alpha * gw1 + gw2,
    )


# ---------------------------------------------------------------------------
# Teacher similarity and relational distillation
# ---------------------------------------------------------------------------


def teacher_similarity(embeddings: np.ndarray, source: str = "teacher") -> SimilarityMatrix:
    E = _as_batch(embeddings, "teacher embeddings")
    if E.shape[0] < 2:
        raise DegenerateInputError("a similarity matrix needs at least two embeddings")
    S = cosine_matrix(E)
    return SimilarityMatrix(values=0.5 * (S + S.T), source=source)


def fuse_similarity(speech: SimilarityMatrix, face: SimilarityMatrix, mu: float) -> SimilarityMatrix:
    if speech.values.shape != face.values.shape:
        raise ShapeError(f"similarity shapes differ: {speech.values.shape} vs {face.values.shape}")
    if not 0.0 < mu < 1.0:
        raise DomainError(f"mu must lie strictly inside (0, 1), got {mu}")
    return SimilarityMatrix(values=mu * speech.values + (1.0 - mu) * face.values, source="fused")


def kd_loss(S: SimilarityMatrix, speech: np.ndarray, face: np.ndarray, beta: float,
            penalty: str = "l1") -> KdResult:
    """Sum over all (i, j) of |S_ij - cos(speech_i, face_j)| + beta |S_ij - cos(face_i, face_j)|.

    Summed, not averaged. At exactly-zero residuals the subgradient 0 is used.
    """
    F1 = _as_batch(speech, "speech embeddings")
    F2 = _as_batch(face, "face embeddings")
    n = S.n
    if F1.shape[0] != n or F2.shape[0] != n or S.values.shape != (n, n) or F1.shape[1] != F2.shape[1]:
        raise ShapeError(f"similarity {S.values.shape} does not match batches {F1.shape} / {F2.shape}")
    _check_rows_unit(F1, "speech embeddings")
    _check_rows_unit(F2, "face embeddings")

    cross = F1 @ F2.T
    intra = F2 @ F2.T
    r_cross = S.values - cross
    r_intra = S.values - intra
    if penalty == "l1":
        loss = float(np.sum(np.abs(r_cross)) + beta * np.sum(np.abs(r_intra)))
        d_cross = -np.sign(r_cross)
        d_intra = -beta * np.sign(r_intra)
    elif penalty == "squared":
        loss = float(np.sum(r_cross ** 2) + beta * np.sum(r_intra ** 2))
        d_cross = -2.0 * r_cross
        d_intra = -2.0 * beta * r_intra
    else:
        raise DomainError(f"unknown distillation penalty '{penalty}'")

    grad_face = d_cross.T @ F1 + (d_intra + d_intra.T) @ F2
    grad_speech = d_cross @ F2
    return KdResult(loss=loss, grad_face=grad_face, grad_speech=grad_speech)


# ---------------------------------------------------------------------------
# Contrastive alignment
# ---------------------------------------------------------------------------


def contrastive_loss(anchors: np.ndarray, candidates: np.ndarray, labels: Sequence[int], tau: float,
                     groups: Optional[Sequence[int]] = None) -> ContrastiveResult:
    """Temperature-scaled contrastive loss, summed over anchors.

    Candidate i is the positive for anchor i. Negatives for anchor i are the
    candidates whose label differs from labels[i] and, when *groups* is
    given, whose group equals groups[i].
    """
    A = _as_batch(anchors, "anchors")
    C = _as_batch(candidates, "candidates")
    y = np.asarray(labels)
    n = A.shape[0]
    if C.shape != A.shape or y.shape != (n,):
        raise ShapeError(f"anchors {A.shape}, candidates {C.shape} and labels {y.shape} must align")
    if tau <= 0:
        raise DomainError(f"temperature must be positive, got {tau}")
    _check_rows_unit(A, "anchors")
    _check_rows_unit(C, "candidates")

    negatives = y[None, :] != y[:, None]
    if groups is not None:
        g = np.asarray(groups)
        if g.shape != (n,):
            raise ShapeError(f"groups must have shape ({n},), got {g.shape}")
        negatives &= g[None, :] == g[:, None]
    empty = ~negatives.any(axis=1)
    if np.any(empty):
        raise DegenerateInputError(f"anchors {np.flatnonzero(empty).tolist()} have no negatives; "
                                   "every batch needs at least two distinct labels")

    mask = negatives | np.eye(n, dtype=bool)
    logits = (A @ C.T) / tau
    per_anchor = logsumexp(logits, mask, axis=1) - np.diag(logits)

    d_logits = masked_softmax(logits, mask, axis=1)
    d_logits[np.arange(n), np.arange(n)] -= 1.0
    return ContrastiveResult(
        loss=float(np.sum(per_anchor)),
        per_anchor=per_anchor,
        grad_anchors=d_logits @ C / tau,
        grad_candidates=d_logits.T @ A / tau,
    )


def text_alignment_loss(text: np.ndarray, paired: np.ndarray, labels: Sequence[int],
                        modalities: Sequence[str], tau: float) -> ContrastiveResult:
    """Contrastive alignment with text prompts as anchors.

    *paired* row i is the speech or face embedding paired with prompt i;
    *modalities* names which. Negatives never cross modalities.
    """
    tags = np.asarray([getattr(m, "value", m) for m in modalities])
    return contrastive_loss(text, paired, labels, tau, groups=tags)


def cosine_alignment_loss(speech: np.ndarray, face: np.ndarray) -> ContrastiveResult:
    """Sum of (1 - cos) over aligned pairs; stands in for the contrastive term in ablations."""
    F1 = _as_batch(speech, "speech embeddings")
    F2 = _as_batch(face, "face embeddings")
    if F1.shape != F2.shape:
        raise ShapeError(f"batch shapes differ: {F1.shape} vs {F2.shape}")
    per_pair = 1.0 - np.sum(F1 * F2, axis=1)
    return ContrastiveResult(loss=float(np.sum(per_pair)), per_anchor=per_pair,
                             grad_anchors=-F2, grad_candidates=-F1)


# ---------------------------------------------------------------------------
# Stage-1 composite
# ---------------------------------------------------------------------------


def effective_weights(cfg: LossConfig, ablation: Ablation = Ablation.FULL) -> Dict[str, float]:
    """Per-term weights actually applied for an ablation variant."""
    ablation = Ablation(ablation)
    return {
        "ce": 0.0 if ablation == Ablation.NO_CE else 1.0,
        "kd": 0.0 if ablation == Ablation.NO_KD else cfg.gamma,
        "cl": cfg.cl_weight,
        "cl_form": "cosine" if ablation == Ablation.NO_CL else "contrastive",
    }


def stage1_total(ce: float, kd: float, cl: float, cfg: LossConfig,
                 ablation: Ablation = Ablation.FULL) -> float:
    w = effective_weights(cfg, ablation)
    return float(w["ce"] * ce + w["kd"] * kd + w["cl"] * cl)


def stage1_loss(speech: np.ndarray, face: np.ndarray, labels: Sequence[int], weights: ClassifierWeights,
                fused: SimilarityMatrix, cfg: LossConfig,
                ablation: Ablation = Ablation.FULL) -> Stage1Result:
    """L = L_ce + gamma * L_kd + L_cl for one face-speech batch.

    Speech embeddings come from the frozen encoder; only face and W
    gradients are returned.
    """
    w = effective_weights(cfg, ablation)
    grad_face = np.zeros_like(np.asarray(face, dtype=np.float64))
    grad_W = np.zeros_like(weights.W)

    ce_value = 0.0
    if w["ce"] > 0:
        ce = shared_weight_ce(speech, labels, face, labels, weights, cfg)
        ce_value = ce.loss
        grad_face += ce.grad_face
        grad_W += ce.grad_W

    kd_value = 0.0
    if w["kd"] > 0:
        kd = kd_loss(fused, speech, face, cfg.beta, cfg.kd_penalty)
        kd_value = kd.loss
        grad_face += w["kd"] * kd.grad_face

    cl_value = 0.0
    if w["cl"] > 0:
        if w["cl_form"] == "cosine":
            cl = cosine_alignment_loss(speech, face)
        else:
            cl = contrastive_loss(speech, face, labels, cfg.tau)
        cl_value = cl.loss
        grad_face += w["cl"] * cl.grad_candidates

    total = stage1_total(ce_value, kd_value, cl_value, cfg, ablation)
    if not np.isfinite(total):
        logging.warning(f"Non-finite stage-1 loss: ce={ce_value} kd={kd_value} cl={cl_value}")
    return Stage1Result(total=float(total), ce=ce_value, kd=kd_value, cl=cl_value,
                        grad_face=grad_face, grad_W=grad_W)
