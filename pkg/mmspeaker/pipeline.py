"""
Training stages, bundle checkpoints and any-modality inference.

Stage 0 pretrains the speech encoder and the face teacher with per-modality
additive-margin classification, then freezes both. Stage 1 trains a student
face encoder (a copy of the face teacher plus an identity-initialised head)
against the frozen speech space. Stage 2 trains the text-prompt encoder
against the frozen speech and face encoders. `embed_any` routes an input to
the encoder of its modality.
"""

import json
import logging
import os
import statistics
from dataclasses import dataclass, field
from typing import Dict, List, Optional, Sequence, Union

import numpy as np

from . import checkpoint
from .config import EvalConfig, TrainConfig
from .encoders import (
    Embedding,
    MlpEncoder,
    Modality,
    TeacherEncoder,
    TextEncoder,
    backprop,
    encode,
    encode_batch,
    encode_text,
    encode_text_batch,
    init_mlp,
    init_text_encoder,
    student_from_teacher,
)
from .errors import ConfigError, FormatError, PrerequisiteError, StateError, TrainingError
from .losses import (
    Ablation,
    ClassifierWeights,
    am_softmax_loss,
    effective_weights,
    fuse_similarity,
    stage1_loss,
    teacher_similarity,
    text_alignment_loss,
)
from .numerics import ParamOptimizer, clip_by_global_norm
from .synthdata import (
    VOCAB_SIZE,
    Corpus,
    Observation,
    Pairing,
    PromptTokens,
    augment_observation,
    sample_pair_batch,
    stack_features,
)
from .training_log import TrainingLog

BUNDLE_FORMAT_VERSION = 1
MANIFEST_NAME = "manifest.json"
BUNDLE_FILES = {
    "speech": "speech.enc",
    "face_teacher": "face_teacher.enc",
    "face": "face.enc",
    "classifier": "classifier.enc",
    "text": "text.enc",
}

# Per-stage salts so every stage draws from its own seeded stream.
_SALTS = {"stage0_speech": 0, "stage0_face": 1, "stage1": 2, "stage2": 3, "probe": 4}
_SEED_RANGE = 2**31 - 1


@dataclass
class ModelBundle:
    speech: Optional[TeacherEncoder] = None
    face_teacher: Optional[TeacherEncoder] = None
    face: Optional[MlpEncoder] = None
    classifier: Optional[ClassifierWeights] = None
    text: Optional[TextEncoder] = None
    manifest: Dict = field(default_factory=dict)

    def encoder_for(self, modality: Modality):
        encoder = {Modality.SPEECH: self.speech, Modality.FACE: self.face, Modality.TEXT: self.text}[Modality(modality)]
        if encoder is None:
            raise StateError(f"bundle has no trained {Modality(modality).value} encoder")
        return encoder

    @property
    def stages(self) -> List[str]:
        done = []
        if self.speech is not None and self.face_teacher is not None:
            done.append("0")
        if self.face is not None:
            done.append("1")
        if self.text is not None:
            done.append("2")
        return done


@dataclass
class StageResult:
    stage: str
    steps: int
    initial_loss: float
    final_loss: float
    records: List[Dict] = field(default_factory=list)


def _stage_rng(seed: int, stage: str) -> np.random.Generator:
    return np.random.default_rng([seed, _SALTS[stage]])


def _check_steps(cfg: TrainConfig) -> None:
    if cfg.steps <= 0:
        raise ConfigError(f"train.steps must be positive, got {cfg.steps}")
    if cfg.batch_size < 2 or cfg.text_batch_size < 2:
        raise ConfigError("batch sizes must be at least 2")


def _check_finite(value: float, stage: str, step: int) -> None:
    if not np.isfinite(value):
        logging.error(f"{stage}: loss became non-finite at step {step}")
        raise TrainingError(f"{stage}: non-finite loss at step {step}", stage=stage, step=step)


def _should_log(step: int, cfg: TrainConfig) -> bool:
    return step % cfg.log_every == 0 or step == cfg.steps - 1


def _apply_update(optimizer: ParamOptimizer, params: Dict[str, np.ndarray], grads: Dict[str, np.ndarray],
                  cfg: TrainConfig, stage: str, step: int) -> Dict[str, np.ndarray]:
    if cfg.grad_clip is not None:
        grads = clip_by_global_norm(grads, cfg.grad_clip)
    for name, g in grads.items():
        if not np.all(np.isfinite(g)):
            logging.error(f"{stage}: gradient '{name}' became non-finite at step {step}")
            raise TrainingError(f"{stage}: non-finite gradient at step {step}", stage=stage, step=step)
    return optimizer.update(params, grads)


def _augmented(observations: Sequence[Observation], strength: float, rng: np.random.Generator) -> np.ndarray:
    seeds = rng.integers(0, _SEED_RANGE, size=len(observations))
    return stack_features([augment_observation(o, strength, int(s)) for o, s in zip(observations, seeds)])


def _prefixed(prefix: str, params: Dict[str, np.ndarray]) -> Dict[str, np.ndarray]:
    return {f"{prefix}.{k}": v for k, v in params.items()}


def _unprefixed(prefix: str, params: Dict[str, np.ndarray]) -> Dict[str, np.ndarray]:
    return {k[len(prefix) + 1:]: v for k, v in params.items() if k.startswith(prefix + ".")}


# ---------------------------------------------------------------------------
# Stage 0
# ---------------------------------------------------------------------------


def _pretrain_classifier(corpus: Corpus, modality: Modality, cfg: TrainConfig, stage: str,
                         log: Optional[TrainingLog]):
    """Additive-margin classification of one modality over the train speakers."""
    _check_steps(cfg)
    rng = _stage_rng(cfg.seed, stage)
    encoder = init_mlp(corpus.config.feature_dim, cfg.embedding_dim, cfg.hidden, rng, modality=modality)
    weights = ClassifierWeights.init(cfg.embedding_dim, len(corpus.train_ids), rng)
    optimizer = ParamOptimizer({**_prefixed("enc", encoder.params()), "W": weights.W}, cfg.learning_rate)
    loss_cfg = cfg.loss

    def side(batch):
        return batch.right if modality == Modality.SPEECH else batch.left

    probe = sample_pair_batch(corpus, Pairing.FACE_SPEECH, cfg.batch_size, int(_stage_rng(cfg.seed, "probe").integers(_SEED_RANGE)))

    def probe_loss(enc, w) -> float:
        emb, _ = encode_batch(enc, stack_features(side(probe)))
        return am_softmax_loss(emb, probe.labels, w, loss_cfg.margin, loss_cfg.scale)[0]

    initial = probe_loss(encoder, weights)
    records = []
    for step in range(cfg.steps):
        batch = sample_pair_batch(corpus, Pairing.FACE_SPEECH, cfg.batch_size, int(rng.integers(_SEED_RANGE)))
        if modality == Modality.FACE:
            features = _augmented(side(batch), cfg.augment_strength, rng)
        else:
            features = stack_features(side(batch))
        emb, cache = encode_batch(encoder, features)
        loss, d_emb, d_w = am_softmax_loss(emb, batch.labels, weights, loss_cfg.margin, loss_cfg.scale)
        _check_finite(loss, stage, step)
        if log is not None and _should_log(step, cfg):
            records.append(log.record(stage, step, total=loss, l_ce=loss))
            logging.info(f"{stage} step {step}: loss {loss:.4f}")

        enc_grads, _ = backprop(encoder, cache, d_emb)
        params = {**_prefixed("enc", encoder.params()), "W": weights.W}
        grads = {**_prefixed("enc", enc_grads), "W": d_w}
        updated = _apply_update(optimizer, params, grads, cfg, stage, step)
        encoder = encoder.with_params(_unprefixed("enc", updated))
        weights = weights.renormalized(updated["W"])

    final = probe_loss(encoder, weights)
    _check_finite(final, stage, cfg.steps)
    logging.info(f"{stage}: probe loss {initial:.4f} -> {final:.4f}")
    result = StageResult(stage=stage, steps=cfg.steps, initial_loss=initial, final_loss=final, records=records)
    return TeacherEncoder.freeze(encoder, modality), weights, result


def pretrain_speech_encoder(corpus: Corpus, cfg: TrainConfig, log: Optional[TrainingLog] = None):
    """Train and freeze the speech encoder. Returns (frozen encoder, classifier, result)."""
    return _pretrain_classifier(corpus, Modality.SPEECH, cfg, "stage0_speech", log)


def pretrain_face_teacher(corpus: Corpus, cfg: TrainConfig, log: Optional[TrainingLog] = None):
    return _pretrain_classifier(corpus, Modality.FACE, cfg, "stage0_face", log)


def pretrain(corpus: Corpus, cfg: TrainConfig, log: Optional[TrainingLog] = None) -> ModelBundle:
    speech, speech_classifier, _ = pretrain_speech_encoder(corpus, cfg, log)
    face_teacher, _, _ = pretrain_face_teacher(corpus, cfg, log)
    return ModelBundle(speech=speech, face_teacher=face_teacher, classifier=speech_classifier)


# ---------------------------------------------------------------------------
# Stage 1
# ---------------------------------------------------------------------------


def train_face_encoder(corpus: Corpus, bundle: ModelBundle, cfg: TrainConfig,
                       ablation: Union[Ablation, str] = Ablation.FULL, log: Optional[TrainingLog] = None):
    """Align a student face encoder to the frozen speech space.

    The shared classifier starts from the stage-0 speech classifier when the
    bundle carries one. Returns (face encoder, classifier, result).
    """
    _check_steps(cfg)
    if bundle.speech is None or bundle.face_teacher is None:
        raise PrerequisiteError("stage 1 needs the stage-0 speech encoder and face teacher")
    ablation = Ablation(ablation)
    stage = "stage1"
    rng = _stage_rng(cfg.seed, stage)
    loss_cfg = cfg.loss
    speech, face_teacher = bundle.speech, bundle.face_teacher

    face = student_from_teacher(face_teacher)
    if bundle.classifier is not None and bundle.classifier.W.shape == (cfg.embedding_dim, len(corpus.train_ids)):
        weights = ClassifierWeights(np.array(bundle.classifier.W))
    else:
        weights = ClassifierWeights.init(cfg.embedding_dim, len(corpus.train_ids), rng)
    optimizer = ParamOptimizer({**_prefixed("face", face.params()), "W": weights.W}, cfg.learning_rate)

    def evaluate(enc, w, speech_features, face_features, labels):
        speech_emb, _ = encode_batch(speech, speech_features)
        teacher_emb, _ = encode_batch(face_teacher, face_features)
        fused = fuse_similarity(teacher_similarity(speech_emb, "speech"),
                                teacher_similarity(teacher_emb, "face"), loss_cfg.mu)
        face_emb, cache = encode_batch(enc, face_features)
        return stage1_loss(speech_emb, face_emb, labels, w, fused, loss_cfg, ablation), cache

    probe = sample_pair_batch(corpus, Pairing.FACE_SPEECH, cfg.batch_size, int(_stage_rng(cfg.seed, "probe").integers(_SEED_RANGE)))
    probe_args = (stack_features(probe.right), stack_features(probe.left), probe.labels)
    initial = evaluate(face, weights, *probe_args)[0].total

    records = []
    for step in range(cfg.steps):
        batch = sample_pair_batch(corpus, Pairing.FACE_SPEECH, cfg.batch_size, int(rng.integers(_SEED_RANGE)))
        faces = _augmented(batch.left, cfg.augment_strength, rng)
        result, cache = evaluate(face, weights, stack_features(batch.right), faces, batch.labels)
        _check_finite(result.total, stage, step)
        if log is not None and _should_log(step, cfg):
            records.append(log.record(stage, step, total=result.total, l_ce=result.ce, l_kd=result.kd, l_cl=result.cl))
            logging.info(f"{stage} step {step}: total {result.total:.4f} "
                         f"(ce {result.ce:.4f}, kd {result.kd:.4f}, cl {result.cl:.4f})")

        face_grads, _ = backprop(face, cache, result.grad_face)
        params = {**_prefixed("face", face.params()), "W": weights.W}
        grads = {**_prefixed("face", face_grads), "W": result.grad_W}
        updated = _apply_update(optimizer, params, grads, cfg, stage, step)
        face = face.with_params(_unprefixed("face", updated))
        weights = weights.renormalized(updated["W"])

    final = evaluate(face, weights, *probe_args)[0].total
    _check_finite(final, stage, cfg.steps)
    logging.info(f"{stage} ({ablation.value}): probe total {initial:.4f} -> {final:.4f}")
    return face, weights, StageResult(stage=stage, steps=cfg.steps, initial_loss=initial, final_loss=final,
                                      records=records)


# ---------------------------------------------------------------------------
# Stage 2
# ---------------------------------------------------------------------------


def _text_pairings(cfg: TrainConfig) -> List[Pairing]:
    return {
        "both": [Pairing.TEXT_SPEECH, Pairing.TEXT_FACE],
        "speech": [Pairing.TEXT_SPEECH],
        "face": [Pairing.TEXT_FACE],
    }[cfg.text_pairs]


def _text_batch(corpus: Corpus, bundle: ModelBundle, pairings: List[Pairing], n: int,
                rng: np.random.Generator, split: str = "train"):
    """Stack one batch per pairing; returns (prompt token lists, paired embeddings, labels, modality tags)."""
    tokens, paired, labels, tags = [], [], [], []
    for pairing in pairings:
        batch = sample_pair_batch(corpus, pairing, n, int(rng.integers(_SEED_RANGE)), split=split)
        modality = Modality.SPEECH if pairing == Pairing.TEXT_SPEECH else Modality.FACE
        emb, _ = encode_batch(bundle.encoder_for(modality), stack_features(batch.right))
        tokens.extend(list(p.tokens) for p in batch.left)
        paired.append(emb)
        labels.append(batch.labels)
        tags.extend([modality.value] * len(batch))
    return tokens, np.concatenate(paired), np.concatenate(labels), tags


def train_text_encoder(corpus: Corpus, bundle: ModelBundle, cfg: TrainConfig,
                       log: Optional[TrainingLog] = None):
    """Align the text-prompt encoder to the frozen speech and face encoders.

    Returns (text encoder, result); the result's losses are the alignment
    loss on a fixed held-out batch before and after training.
    """
    _check_steps(cfg)
    if bundle.speech is None or bundle.face is None:
        raise PrerequisiteError("stage 2 needs the stage-0 speech encoder and the stage-1 face encoder")
    stage = "stage2"
    rng = _stage_rng(cfg.seed, stage)
    tau = cfg.loss.tau
    pairings = _text_pairings(cfg)
    text = init_text_encoder(VOCAB_SIZE, cfg.text_width, cfg.embedding_dim, cfg.hidden, rng)
    optimizer = ParamOptimizer(text.params(), cfg.learning_rate)

    validation = _text_batch(corpus, bundle, pairings, cfg.text_batch_size,
                             _stage_rng(cfg.seed, "probe"), split="heldout")

    def validation_loss(enc) -> float:
        tokens, paired, labels, tags = validation
        anchors, _ = encode_text_batch(enc, tokens)
        return text_alignment_loss(anchors, paired, labels, tags, tau).loss

    initial = validation_loss(text)
    records = []
    for step in range(cfg.steps):
        tokens, paired, labels, tags = _text_batch(corpus, bundle, pairings, cfg.text_batch_size, rng)
        anchors, cache = encode_text_batch(text, tokens)
        result = text_alignment_loss(anchors, paired, labels, tags, tau)
        _check_finite(result.loss, stage, step)
        if log is not None and _should_log(step, cfg):
            records.append(log.record(stage, step, total=result.loss, l_cl=result.loss))
            logging.info(f"{stage} step {step}: alignment loss {result.loss:.4f}")

        grads, _ = backprop(text, cache, result.grad_anchors)
        text = text.with_params(_apply_update(optimizer, text.params(), grads, cfg, stage, step))

    final = validation_loss(text)
    _check_finite(final, stage, cfg.steps)
    logging.info(f"{stage}: validation loss {initial:.4f} -> {final:.4f}")
    return text, StageResult(stage=stage, steps=cfg.steps, initial_loss=initial, final_loss=final, records=records)


# ---------------------------------------------------------------------------
# Inference routing
# ---------------------------------------------------------------------------


def embed_any(item: Union[Observation, PromptTokens], bundle: ModelBundle) -> Embedding:
    if isinstance(item, PromptTokens):
        return encode_text(bundle.encoder_for(Modality.TEXT), item.tokens)[0]
    if isinstance(item, Observation):
        return encode(bundle.encoder_for(item.modality), item.features)[0]
    raise StateError(f"no encoder route for input of type {type(item).__name__}")


def embed_many(items: Sequence[Union[Observation, PromptTokens]], bundle: ModelBundle) -> np.ndarray:
    """Batched embed_any over items of a single modality."""
    if not items:
        return np.zeros((0, 0))
    if all(isinstance(i, PromptTokens) for i in items):
        return encode_text_batch(bundle.encoder_for(Modality.TEXT), [list(i.tokens) for i in items])[0]
    modality = items[0].modality
    if any(getattr(i, "modality", None) != modality for i in items):
        raise StateError("embed_many expects items of a single modality")
    return encode_batch(bundle.encoder_for(modality), stack_features(items))[0]


# ---------------------------------------------------------------------------
# Bundle checkpoints
# ---------------------------------------------------------------------------

_EXPECTED_TYPES = {
    "speech": TeacherEncoder,
    "face_teacher": TeacherEncoder,
    "face": MlpEncoder,
    "classifier": ClassifierWeights,
    "text": TextEncoder,
}


def save_bundle(bundle: ModelBundle, directory: str) -> None:
    """Write every present part and remove files left over from parts the bundle no longer has."""
    os.makedirs(directory, exist_ok=True)
    for part, filename in BUNDLE_FILES.items():
        obj = getattr(bundle, part)
        path = os.path.join(directory, filename)
        if obj is not None:
            checkpoint.save_checkpoint(obj, path)
        elif os.path.exists(path):
            os.remove(path)
            logging.info(f"Removed stale {filename} from {directory}")
    manifest = dict(bundle.manifest)
    manifest["format_version"] = BUNDLE_FORMAT_VERSION
    manifest["stages"] = bundle.stages
    manifest["parts"] = sorted(p for p in BUNDLE_FILES if getattr(bundle, p) is not None)
    with open(os.path.join(directory, MANIFEST_NAME), "w", encoding="utf-8") as f:
        json.dump(manifest, f, indent=2, sort_keys=True)
        f.write("\n")
    logging.info(f"Bundle saved to {directory} (stages {', '.join(bundle.stages) or 'none'})")


def load_bundle(directory: str) -> ModelBundle:
    """Load the parts the manifest lists; files it does not list are ignored."""
    manifest_path = os.path.join(directory, MANIFEST_NAME)
    if not os.path.isfile(manifest_path):
        raise PrerequisiteError(f"no bundle at {directory} (missing {MANIFEST_NAME})")
    with open(manifest_path, "r", encoding="utf-8") as f:
        try:
            manifest = json.load(f)
        except json.JSONDecodeError as e:
            raise FormatError(f"{manifest_path}: {e}") from e
    if manifest.get("format_version") != BUNDLE_FORMAT_VERSION:
        raise FormatError(f"{manifest_path}: unsupported bundle version {manifest.get('format_version')}")
    listed = manifest.get("parts")
    if not isinstance(listed, list) or any(p not in BUNDLE_FILES for p in listed):
        raise FormatError(f"{manifest_path}: 'parts' must list bundle parts from {sorted(BUNDLE_FILES)}")

    parts = {}
    for part in listed:
        path = os.path.join(directory, BUNDLE_FILES[part])
        if not os.path.isfile(path):
            raise FormatError(f"{manifest_path}: lists '{part}' but {path} is missing")
        obj = checkpoint.load_checkpoint(path)
        if not isinstance(obj, _EXPECTED_TYPES[part]):
            raise FormatError(f"{path}: expected a {_EXPECTED_TYPES[part].__name__}, found {type(obj).__name__}")
        parts[part] = obj
    return ModelBundle(manifest=manifest, **parts)


# ---------------------------------------------------------------------------
# Orchestration
# ---------------------------------------------------------------------------


def run_stage(stage: str, corpus: Corpus, bundle: ModelBundle, cfg: TrainConfig,
              ablation: Union[Ablation, str] = Ablation.FULL, log: Optional[TrainingLog] = None) -> ModelBundle:
    """Run one stage ("0", "1" or "2") on top of *bundle*; returns the extended bundle."""
    if stage == "0":
        trained = pretrain(corpus, cfg, log)
        return ModelBundle(speech=trained.speech, face_teacher=trained.face_teacher,
                           classifier=trained.classifier, manifest=dict(bundle.manifest))
    if stage == "1":
        face, weights, _ = train_face_encoder(corpus, bundle, cfg, ablation, log)
        return ModelBundle(speech=bundle.speech, face_teacher=bundle.face_teacher, face=face,
                           classifier=weights, manifest=dict(bundle.manifest))
    if stage == "2":
        text, _ = train_text_encoder(corpus, bundle, cfg, log)
        return ModelBundle(speech=bundle.speech, face_teacher=bundle.face_teacher, face=bundle.face,
                           classifier=bundle.classifier, text=text, manifest=dict(bundle.manifest))
    raise ConfigError(f"unknown stage '{stage}'")


@dataclass
class AblationReport:
    seeds: List[int]
    eer: Dict[str, List[float]]
    min_dcf: Dict[str, List[float]]
    effective_weights: Dict[str, Dict]

    def median_eer(self, variant: str) -> float:
        return statistics.median(self.eer[variant])

    def median_min_dcf(self, variant: str) -> float:
        return statistics.median(self.min_dcf[variant])


def run_ablation(corpus: Corpus, seeds: Sequence[int], cfg: TrainConfig, eval_cfg: EvalConfig,
                 variants: Sequence[Union[Ablation, str]] = tuple(Ablation)) -> AblationReport:
    """Stage 0 once per seed, then stage 1 per variant, all evaluated identically."""
    from .evaluation import evaluate_bundle

    variants = [Ablation(v) for v in variants]
    eer = {v.value: [] for v in variants}
    min_dcf = {v.value: [] for v in variants}
    ablation_eval = eval_cfg.model_copy(update={"silhouette_source": "none", "reference_speech": False})
    for seed in seeds:
        seeded = cfg.model_copy(update={"seed": int(seed)})
        base = pretrain(corpus, seeded)
        for variant in variants:
            face, weights, _ = train_face_encoder(corpus, base, seeded, variant)
            bundle = ModelBundle(speech=base.speech, face_teacher=base.face_teacher, face=face, classifier=weights)
            report = evaluate_bundle(corpus, bundle, ablation_eval)
            eer[variant.value].append(report.eer)
            min_dcf[variant.value].append(report.min_dcf)
            logging.info(f"Ablation seed {seed} {variant.value}: EER {report.eer:.4f}, minDCF {report.min_dcf:.4f}")
    report = AblationReport(
        seeds=[int(s) for s in seeds],
        eer=eer,
        min_dcf=min_dcf,
        effective_weights={v.value: effective_weights(cfg.loss, v) for v in variants},
    )
    for variant in variants:
        logging.info(f"Ablation {variant.value}: median EER {report.median_eer(variant.value):.4f}, "
                     f"median minDCF {report.median_min_dcf(variant.value):.4f} over {len(report.seeds)} seeds")
    return report
