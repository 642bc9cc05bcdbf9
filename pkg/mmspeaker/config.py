"""
Configuration schemas and loading.

Every block is a pydantic model that rejects unknown keys, so a typo in a run
config fails loudly instead of silently falling back to a default. Run
configs are YAML files; an empty file means "all defaults".
"""

import hashlib
import json
import logging
import os
from typing import List, Literal, Optional

import yaml
from pydantic import BaseModel, ConfigDict, Field, ValidationError

from .errors import ConfigError

SEED_ENV_VAR = "MMSPEAKER_SEED"

# ---------------------------------------------------------------------------
# Pydantic Schemas
# ---------------------------------------------------------------------------


class LossConfig(BaseModel):
    """Loss hyperparameters."""

    model_config = ConfigDict(extra="forbid", frozen=True)

    alpha: float = Field(0.1, ge=0, description="speech-branch classification weight")
    margin: float = Field(0.2, ge=0, description="additive margin m")
    scale: float = Field(30.0, gt=0, description="logit scale s")
    mu: float = Field(0.8, gt=0, lt=1, description="speech-teacher weight in the fused similarity")
    beta: float = Field(0.1, ge=0, description="intra-face distillation weight")
    tau: float = Field(0.1, gt=0, description="contrastive temperature")
    gamma: float = Field(10.0, ge=0, description="distillation weight in the stage-1 total")
    cl_weight: float = Field(1.0, ge=0, description="contrastive term weight in the stage-1 total")
    kd_penalty: Literal["l1", "squared"] = "l1"


class CorpusConfig(BaseModel):
    model_config = ConfigDict(extra="forbid", frozen=True)

    n_train_speakers: int = Field(64, ge=2)
    n_heldout_speakers: int = Field(16, ge=2)
    latent_dim: int = Field(12, ge=3)
    feature_dim: int = Field(32, ge=1)
    nuisance_dim: int = Field(4, ge=1)
    observations_per_modality: int = Field(8, ge=2)
    prompts_per_speaker: int = Field(4, ge=1)
    noise_scale: float = Field(0.1, ge=0)
    nuisance_scale: float = Field(0.5, ge=0)
    seed: int = 0


class TrainConfig(BaseModel):
    model_config = ConfigDict(extra="forbid", frozen=True)

    steps: int = Field(5000, gt=0)
    batch_size: int = Field(32, ge=2)
    text_batch_size: int = Field(16, ge=2, description="pairs per modality in each stage-2 step")
    learning_rate: float = Field(0.0002, gt=0)
    seed: int = 0
    log_every: int = Field(100, ge=1)
    augment_strength: float = Field(1.0, ge=0)
    grad_clip: Optional[float] = Field(None, gt=0)
    text_pairs: Literal["both", "face", "speech"] = "both"
    embedding_dim: int = Field(16, ge=2)
    hidden: List[int] = Field(default_factory=lambda: [64, 64])
    text_width: int = Field(32, ge=2)
    loss: LossConfig = Field(default_factory=LossConfig)


class EvalConfig(BaseModel):
    model_config = ConfigDict(extra="forbid", frozen=True)

    trials_per_speaker: int = Field(20, ge=1)
    seed: int = 0
    p_target: float = Field(0.01, gt=0, lt=1)
    c_miss: float = Field(1.0, gt=0)
    c_fa: float = Field(1.0, gt=0)
    enroll_modality: Literal["face", "speech"] = "face"
    test_modality: Literal["face", "speech"] = "speech"
    silhouette_source: Literal["prompts", "faces", "speech", "none"] = "prompts"
    # also score speech-vs-speech trials and report them next to the main protocol
    reference_speech: bool = True


class PathsConfig(BaseModel):
    """Default locations; CLI path arguments take precedence."""

    model_config = ConfigDict(extra="forbid", frozen=True)

    corpus: str = "runs/corpus.jsonl"
    checkpoint_dir: str = "runs/bundle"
    report_dir: str = "runs/report"


class RunConfig(BaseModel):
    """Everything needed to reproduce a run from one file.

    `seed` is the global seed; it is added to each block's own seed.
    """

    model_config = ConfigDict(extra="forbid", frozen=True)

    seed: int = 0
    corpus: CorpusConfig = Field(default_factory=CorpusConfig)
    train: TrainConfig = Field(default_factory=TrainConfig)
    eval: EvalConfig = Field(default_factory=EvalConfig)
    paths: PathsConfig = Field(default_factory=PathsConfig)

    def corpus_config(self) -> CorpusConfig:
        return self.corpus.model_copy(update={"seed": self.seed + self.corpus.seed})

    def train_config(self) -> TrainConfig:
        return self.train.model_copy(update={"seed": self.seed + self.train.seed})

    def eval_config(self) -> EvalConfig:
        return self.eval.model_copy(update={"seed": self.seed + self.eval.seed})


# ---------------------------------------------------------------------------
# Loading helpers
# ---------------------------------------------------------------------------


def _describe_validation_error(err: ValidationError) -> str:
    parts = []
    for issue in err.errors():
        loc = ".".join(str(p) for p in issue["loc"]) or "<root>"
        parts.append(f"{loc}: {issue['msg']}")
    return "; ".join(parts)


def parse_run_config(data: Optional[dict], environ: Optional[dict] = None) -> RunConfig:
    """Validate a raw mapping, applying the seed environment override."""
    environ = os.environ if environ is None else environ
    data = dict(data or {})

    env_seed = environ.get(SEED_ENV_VAR)
    if env_seed is not None:
        if "seed" in data:
            raise ConfigError(f"seed is set both in the config file and in ${SEED_ENV_VAR}; remove one")
        try:
            data["seed"] = int(env_seed)
        except ValueError:
            raise ConfigError(f"${SEED_ENV_VAR} must be an integer, got '{env_seed}'")
        logging.info(f"Global seed taken from ${SEED_ENV_VAR}: {data['seed']}")

    try:
        return RunConfig.model_validate(data)
    except ValidationError as e:
        raise ConfigError(_describe_validation_error(e)) from e


def load_run_config(path: Optional[str], environ: Optional[dict] = None) -> RunConfig:
    if path is None:
        return parse_run_config({}, environ)
    try:
        with open(path, "r", encoding="utf-8") as f:
            data = yaml.safe_load(f)
    except yaml.YAMLError as e:
        raise ConfigError(f"cannot parse {path}: {e}") from e
    if data is not None and not isinstance(data, dict):
        raise ConfigError(f"{path}: config root must be a mapping")
    return parse_run_config(data, environ)


def canonical_json(model: BaseModel) -> str:
    return json.dumps(model.model_dump(mode="json"), sort_keys=True, separators=(",", ":"))


def config_hash(model: BaseModel) -> str:
    return hashlib.sha256(canonical_json(model).encode("utf-8")).hexdigest()
