"""
Objective evaluation: cross-modal verification trials, EER, minDCF, DET
points, gender silhouette and prompt retrieval.

Threshold convention: a trial is accepted when its score is >= the threshold.
FRR(t) counts targets below t, FAR(t) counts nontargets at or above t. The
sweep runs over every distinct score plus +inf (reject everything).
"""

import json
import logging
from dataclasses import dataclass
from typing import Dict, List, Optional, Sequence, Tuple, Union

import numpy as np
from pydantic import BaseModel, ConfigDict, Field
from sklearn.metrics import roc_curve
from sklearn.metrics import silhouette_score as _sk_silhouette_score

from .config import EvalConfig
from .encoders import Modality
from .errors import DegenerateInputError, DomainError, FormatError, ShapeError
from .numerics import cosine_matrix
from .pipeline import ModelBundle, embed_many
from .synthdata import Corpus

# ---------------------------------------------------------------------------
# Trials and scores
# ---------------------------------------------------------------------------


@dataclass(frozen=True)
class Trial:
    enroll_speaker: int
    enroll_index: int
    test_speaker: int
    test_index: int
    target: bool


@dataclass(frozen=True, eq=False)
class TrialSet:
    """Trials plus the enrollment/test embeddings they refer to, row-aligned with `trials`."""

    trials: Tuple[Trial, ...]
    enroll: np.ndarray
    test: np.ndarray
    enroll_modality: Modality
    test_modality: Modality

    def __len__(self) -> int:
        return len(self.trials)

    @property
    def targets(self) -> np.ndarray:
        return np.array([t.target for t in self.trials], dtype=bool)


@dataclass(frozen=True, eq=False)
class ScoreSet:
    scores: np.ndarray
    targets: np.ndarray

    def __post_init__(self):
        scores = np.asarray(self.scores, dtype=np.float64)
        targets = np.asarray(self.targets, dtype=bool)
        if scores.ndim != 1 or scores.shape != targets.shape:
            raise ShapeError(f"scores {scores.shape} and target flags {targets.shape} must be equal-length vectors")
        if not np.all(np.isfinite(scores)):
            raise DomainError("scores must be finite")
        object.__setattr__(self, "scores", scores)
        object.__setattr__(self, "targets", targets)

    @classmethod
    def from_lists(cls, target_scores: Sequence[float], nontarget_scores: Sequence[float]) -> "ScoreSet":
        scores = np.concatenate([np.asarray(target_scores, dtype=np.float64),
                                 np.asarray(nontarget_scores, dtype=np.float64)])
        targets = np.concatenate([np.ones(len(target_scores), dtype=bool), np.zeros(len(nontarget_scores), dtype=bool)])
        return cls(scores, targets)

    @property
    def n_target(self) -> int:
        return int(np.sum(self.targets))

    @property
    def n_nontarget(self) -> int:
        return int(self.targets.size - np.sum(self.targets))


def _embed_split(corpus: Corpus, bundle: ModelBundle, modality: Modality, ids: Sequence[int]) -> Dict[int, np.ndarray]:
    return {sid: embed_many(corpus.observations[sid][modality], bundle) for sid in ids}


def build_trials(corpus: Corpus, bundle: ModelBundle, trials_per_speaker: int, seed: int,
                 enroll_modality: Union[Modality, str] = Modality.FACE,
                 test_modality: Union[Modality, str] = Modality.SPEECH) -> TrialSet:
    """trials_per_speaker target and nontarget trials for every held-out speaker.

    The enrollment side always belongs to the listed speaker; nontarget test
    sides come from a different held-out speaker. When both sides use the same
    modality a target trial never pairs an observation with itself.
    """
    ids = list(corpus.heldout_ids)
    if len(ids) < 2:
        raise DegenerateInputError(f"held-out split has {len(ids)} speaker(s); need at least two")
    enroll_modality, test_modality = Modality(enroll_modality), Modality(test_modality)
    enroll_emb = _embed_split(corpus, bundle, enroll_modality, ids)
    test_emb = _embed_split(corpus, bundle, test_modality, ids)
    same_modality = enroll_modality == test_modality
    if same_modality and min(len(v) for v in enroll_emb.values()) < 2:
        raise DegenerateInputError("same-modality trials need at least two observations per speaker")

    rng = np.random.default_rng(seed)
    trials, enroll_rows, test_rows = [], [], []
    for sid in ids:
        others = [o for o in ids if o != sid]
        for _ in range(trials_per_speaker):
            for target in (True, False):
                other = sid if target else others[int(rng.integers(len(others)))]
                e = int(rng.integers(len(enroll_emb[sid])))
                if target and same_modality:
                    t = int(rng.integers(len(test_emb[other]) - 1))
                    t += int(t >= e)
                else:
                    t = int(rng.integers(len(test_emb[other])))
                trials.append(Trial(sid, e, other, t, target))
                enroll_rows.append(enroll_emb[sid][e])
                test_rows.append(test_emb[other][t])
    return TrialSet(trials=tuple(trials), enroll=np.stack(enroll_rows), test=np.stack(test_rows),
                    enroll_modality=enroll_modality, test_modality=test_modality)


def score_trials(trials: TrialSet) -> ScoreSet:
    scores = np.clip(np.sum(trials.enroll * trials.test, axis=1), -1.0, 1.0)
    return ScoreSet(scores, trials.targets)


# ---------------------------------------------------------------------------
# Threshold sweep metrics
# ---------------------------------------------------------------------------


def _sweep(scores: ScoreSet) -> Tuple[np.ndarray, np.ndarray, np.ndarray]:
    """Ascending thresholds (distinct scores, then +inf) with FAR and FRR at each."""
    n_target, n_nontarget = scores.n_target, scores.n_nontarget
    if n_target == 0 or n_nontarget == 0:
        raise DegenerateInputError(f"need at least one target and one nontarget score "
                                   f"(got {n_target} / {n_nontarget})")
    fpr, tpr, thresholds = roc_curve(scores.targets.astype(np.int64), scores.scores, drop_intermediate=False)
    # recover exact integer counts from sklearn's rates
    false_accepts = np.rint(fpr * n_nontarget)
    true_accepts = np.rint(tpr * n_target)
    thresholds = np.array(thresholds, dtype=np.float64)
    thresholds[0] = np.inf
    far = false_accepts / n_nontarget
    frr = (n_target - true_accepts) / n_target
    return thresholds[::-1], far[::-1], frr[::-1]


def compute_eer(scores: ScoreSet) -> Tuple[float, float]:
    """EER and its threshold, linearly interpolated where FAR - FRR changes sign."""
    thresholds, far, frr = _sweep(scores)
    diff = far - frr
    k = int(np.argmax(diff <= 0))
    if diff[k] == 0:
        return float(far[k]), float(thresholds[k])
    t = diff[k - 1] / (diff[k - 1] - diff[k])
    eer = frr[k - 1] + t * (frr[k] - frr[k - 1])
    if np.isfinite(thresholds[k]):
        threshold = thresholds[k - 1] + t * (thresholds[k] - thresholds[k - 1])
    else:
        threshold = thresholds[k - 1]
    return float(eer), float(threshold)


def compute_min_dcf(scores: ScoreSet, p_target: float = 0.01, c_miss: float = 1.0,
                    c_fa: float = 1.0) -> Tuple[float, float]:
    """Normalised minimum detection cost and the threshold attaining it."""
    if not 0.0 < p_target < 1.0:
        raise DomainError(f"p_target must lie inside (0, 1), got {p_target}")
    if c_miss <= 0 or c_fa <= 0:
        raise DomainError("detection costs must be positive")
    thresholds, far, frr = _sweep(scores)
    dcf = c_miss * frr * p_target + c_fa * far * (1.0 - p_target)
    k = int(np.argmin(dcf))
    norm = min(c_miss * p_target, c_fa * (1.0 - p_target))
    return float(dcf[k] / norm), float(thresholds[k])


def det_points(scores: ScoreSet) -> List[Tuple[float, float]]:
    """(FAR, FRR) per distinct threshold in ascending order, ending at the +inf boundary (0, 1)."""
    _, far, frr = _sweep(scores)
    return [(float(a), float(r)) for a, r in zip(far, frr)]


# ---------------------------------------------------------------------------
# Cluster and retrieval metrics
# ---------------------------------------------------------------------------


def silhouette_score(embeddings: np.ndarray, labels: Sequence) -> float:
    """Mean silhouette with cosine distance; singleton clusters score 0."""
    X = np.asarray(embeddings, dtype=np.float64)
    y = np.asarray(labels)
    if X.ndim != 2 or y.shape != (X.shape[0],):
        raise ShapeError(f"embeddings {X.shape} and labels {y.shape} do not align")
    n_clusters = len(np.unique(y))
    if n_clusters < 2:
        raise DegenerateInputError("silhouette needs at least two clusters")
    if n_clusters == X.shape[0]:
        return 0.0
    distances = np.clip(1.0 - cosine_matrix(X), 0.0, None)
    np.fill_diagonal(distances, 0.0)
    return float(_sk_silhouette_score(distances, y, metric="precomputed"))


def prompt_retrieval_accuracy(corpus: Corpus, bundle: ModelBundle, split: str = "heldout") -> float:
    """Top-1 accuracy of matching each prompt to the nearest per-speaker mean speech embedding."""
    ids = list(corpus.split_ids(split))
    centroids = np.stack([np.mean(embed_many(corpus.observations[sid][Modality.SPEECH], bundle), axis=0)
                          for sid in ids])
    hits, total = 0, 0
    for position, sid in enumerate(ids):
        prompts = corpus.prompts[sid]
        if not prompts:
            continue
        sims = cosine_matrix(embed_many(prompts, bundle), centroids)
        hits += int(np.sum(np.argmax(sims, axis=1) == position))
        total += len(prompts)
    if total == 0:
        raise DegenerateInputError(f"split '{split}' has no prompts")
    return hits / total


def _silhouette_inputs(corpus: Corpus, bundle: ModelBundle, source: str) -> Tuple[np.ndarray, List[str]]:
    ids = list(corpus.heldout_ids)
    rows, labels = [], []
    for sid in ids:
        if source == "prompts":
            items = corpus.prompts[sid]
        else:
            items = corpus.observations[sid][Modality.FACE if source == "faces" else Modality.SPEECH]
        emb = embed_many(items, bundle)
        rows.append(emb)
        labels.extend([corpus.profiles[sid].attributes.gender] * len(emb))
    return np.concatenate(rows), labels


# ---------------------------------------------------------------------------
# Report
# ---------------------------------------------------------------------------


class EvalReport(BaseModel):
    model_config = ConfigDict(extra="forbid")

    eer: float = Field(..., ge=0, le=1)
    eer_threshold: float
    eer_interpolation: str = "linear"
    min_dcf: float = Field(..., ge=0)
    min_dcf_threshold: float
    p_target: float
    c_miss: float
    c_fa: float
    silhouette: Optional[float] = Field(None, ge=-1, le=1)
    silhouette_source: str
    prompt_retrieval_accuracy: Optional[float] = Field(None, ge=0, le=1)
    reference_eer: Optional[float] = Field(None, ge=0, le=1)
    reference_min_dcf: Optional[float] = Field(None, ge=0)
    n_trials: int
    n_target: int
    n_nontarget: int
    enroll_modality: str
    test_modality: str
    corpus_digest: str
    eval_seed: int
    fingerprints: Dict[str, str] = Field(default_factory=dict)


@dataclass
class Evaluation:
    report: EvalReport
    scores: ScoreSet
    det: List[Tuple[float, float]]


def evaluate(corpus: Corpus, bundle: ModelBundle, cfg: EvalConfig,
             fingerprints: Optional[Dict[str, str]] = None) -> Evaluation:
    trials = build_trials(corpus, bundle, cfg.trials_per_speaker, cfg.seed, cfg.enroll_modality, cfg.test_modality)
    scores = score_trials(trials)
    eer, eer_threshold = compute_eer(scores)
    min_dcf, dcf_threshold = compute_min_dcf(scores, cfg.p_target, cfg.c_miss, cfg.c_fa)

    silhouette = None
    if cfg.silhouette_source != "none":
        silhouette = silhouette_score(*_silhouette_inputs(corpus, bundle, cfg.silhouette_source))
    retrieval = prompt_retrieval_accuracy(corpus, bundle) if bundle.text is not None else None

    reference_eer = reference_min_dcf = None
    if cfg.reference_speech and (trials.enroll_modality, trials.test_modality) != (Modality.SPEECH, Modality.SPEECH):
        reference = score_trials(build_trials(corpus, bundle, cfg.trials_per_speaker, cfg.seed,
                                              Modality.SPEECH, Modality.SPEECH))
        reference_eer, _ = compute_eer(reference)
        reference_min_dcf, _ = compute_min_dcf(reference, cfg.p_target, cfg.c_miss, cfg.c_fa)
        logging.info(f"Reference speech-vs-speech: EER {reference_eer:.4f}, minDCF {reference_min_dcf:.4f}")

    report = EvalReport(
        eer=eer,
        eer_threshold=eer_threshold,
        min_dcf=min_dcf,
        min_dcf_threshold=dcf_threshold,
        p_target=cfg.p_target,
        c_miss=cfg.c_miss,
        c_fa=cfg.c_fa,
        silhouette=silhouette,
        silhouette_source=cfg.silhouette_source,
        prompt_retrieval_accuracy=retrieval,
        reference_eer=reference_eer,
        reference_min_dcf=reference_min_dcf,
        n_trials=len(trials),
        n_target=scores.n_target,
        n_nontarget=scores.n_nontarget,
        enroll_modality=trials.enroll_modality.value,
        test_modality=trials.test_modality.value,
        corpus_digest=corpus.digest(),
        eval_seed=cfg.seed,
        fingerprints=dict(fingerprints or {}),
    )
    logging.info(f"EER {eer:.4f} @ {eer_threshold:.4f}, minDCF {min_dcf:.4f}, silhouette {silhouette}")
    return Evaluation(report=report, scores=scores, det=det_points(scores))


def evaluate_bundle(corpus: Corpus, bundle: ModelBundle, cfg: EvalConfig,
                    fingerprints: Optional[Dict[str, str]] = None) -> EvalReport:
    return evaluate(corpus, bundle, cfg, fingerprints).report


# ---------------------------------------------------------------------------
# Writers / readers
# ---------------------------------------------------------------------------


def report_json(report: EvalReport) -> str:
    return json.dumps(report.model_dump(mode="json"), indent=2, sort_keys=True) + "\n"


def write_report(report: EvalReport, path: str) -> None:
    with open(path, "w", encoding="utf-8", newline="\n") as f:
        f.write(report_json(report))


def write_det_csv(points: Sequence[Tuple[float, float]], path: str) -> None:
    with open(path, "w", encoding="utf-8", newline="\n") as f:
        f.write("far,frr\n")
        for far, frr in points:
            f.write(f"{far!r},{frr!r}\n")


def write_scores(scores: ScoreSet, path: str) -> None:
    with open(path, "w", encoding="utf-8", newline="\n") as f:
        for score, target in zip(scores.scores, scores.targets):
            f.write(json.dumps({"score": float(score), "target": bool(target)}, sort_keys=True) + "\n")


def read_scores(path: str) -> ScoreSet:
    values, flags = [], []
    with open(path, "r", encoding="utf-8") as f:
        for line_no, line in enumerate(f, start=1):
            if not line.strip():
                continue
            try:
                rec = json.loads(line)
                values.append(float(rec["score"]))
                flags.append(bool(rec["target"]))
            except (KeyError, TypeError, ValueError) as e:
                raise FormatError(f"{path}:{line_no}: malformed score record ({e})") from e
    return ScoreSet(np.array(values, dtype=np.float64), np.array(flags, dtype=bool))
