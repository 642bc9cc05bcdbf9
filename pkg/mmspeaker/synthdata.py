"""
Synthetic multimodal speaker corpus.

Speakers have a latent identity z. Each modality renders observations as
A_o z + B_o u + eps with fixed modality maps, a nuisance vector u (pose,
lighting, channel) and isotropic noise eps. Coarse attributes (gender, pitch,
tempo) are thresholded coordinates of z and drive keyword prompts drawn from
a fixed 32-token vocabulary. Everything is a pure function of (config, seed).

Corpus files are line-delimited JSON, one record per line:

    {"record": "header", "format_version": 1, "config": {...}, "seed": ..., "train_ids": [...], "heldout_ids": [...]}
    {"record": "renderer", "modality": "speech"|"face", "identity_map": [[...]], "nuisance_map": [[...]],
     "nuisance_scale": ..., "noise_scale": ...}
    {"record": "speaker", "speaker_id": ..., "latent": [...], "gender": "A"|"B", "pitch": ..., "tempo": ...}
    {"record": "observation", "speaker_id": ..., "modality": ..., "index": ..., "identity": [...],
     "nuisance": [...], "noise": [...], "features": [...]}
    {"record": "prompt", "speaker_id": ..., "index": ..., "tokens": [...]}
"""

import hashlib
import json
import logging
from dataclasses import dataclass, field
from enum import Enum
from typing import Dict, List, Optional, Sequence, Tuple, Union

import numpy as np

from .config import CorpusConfig
from .encoders import Modality
from .errors import ConfigError, DegenerateInputError, DomainError, FormatError

CORPUS_FORMAT_VERSION = 1

ATTRIBUTE_VALUES = {
    "gender": ("A", "B"),
    "pitch": ("low", "mid", "high"),
    "tempo": ("slow", "mid", "fast"),
}
KEYWORD_TOKENS: Dict[Tuple[str, str], int] = {}
for _name, _values in ATTRIBUTE_VALUES.items():
    for _value in _values:
        KEYWORD_TOKENS[(_name, _value)] = len(KEYWORD_TOKENS)
N_FILLER_TOKENS = 24
VOCAB_SIZE = len(KEYWORD_TOKENS) + N_FILLER_TOKENS
MAX_PROMPT_LENGTH = 16
MAX_FILLERS = 6

# 1/3 quantile of the standard normal; splits a latent coordinate into terciles.
TERCILE = 0.4307272992954576


class Pairing(str, Enum):
    FACE_SPEECH = "face-speech"
    TEXT_FACE = "text-face"
    TEXT_SPEECH = "text-speech"


@dataclass(frozen=True)
class SpeakerAttributes:
    gender: str
    pitch: str
    tempo: str

    def __post_init__(self):
        for name in ATTRIBUTE_VALUES:
            if getattr(self, name) not in ATTRIBUTE_VALUES[name]:
                raise DomainError(f"invalid {name} value '{getattr(self, name)}'")

    @classmethod
    def from_latent(cls, z: np.ndarray) -> "SpeakerAttributes":
        def tercile(x: float, labels: Tuple[str, str, str]) -> str:
            if x < -TERCILE:
                return labels[0]
            return labels[2] if x > TERCILE else labels[1]

        return cls(
            gender="A" if z[0] >= 0 else "B",
            pitch=tercile(z[1], ATTRIBUTE_VALUES["pitch"]),
            tempo=tercile(z[2], ATTRIBUTE_VALUES["tempo"]),
        )

    def keyword_tokens(self) -> List[int]:
        return [KEYWORD_TOKENS[(name, getattr(self, name))] for name in ATTRIBUTE_VALUES]


@dataclass(frozen=True, eq=False)
class SpeakerProfile:
    speaker_id: int
    latent: np.ndarray
    attributes: SpeakerAttributes


@dataclass(frozen=True, eq=False)
class ModalityRenderer:
    """Fixed maps and scales used to render one modality."""

    modality: Modality
    identity_map: np.ndarray
    nuisance_map: np.ndarray
    nuisance_scale: float
    noise_scale: float


@dataclass(frozen=True, eq=False)
class Observation:
    modality: Modality
    features: np.ndarray
    nuisance: np.ndarray
    noise: np.ndarray
    identity: np.ndarray
    speaker_id: int
    renderer: Optional[ModalityRenderer] = field(default=None, repr=False)


@dataclass(frozen=True)
class PromptTokens:
    tokens: Tuple[int, ...]
    speaker_id: Optional[int] = None

    def __post_init__(self):
        if not self.tokens:
            raise DegenerateInputError("a prompt needs at least one token")
        if len(self.tokens) > MAX_PROMPT_LENGTH:
            raise DomainError(f"prompt longer than {MAX_PROMPT_LENGTH} tokens")

    @property
    def modality(self) -> Modality:
        return Modality.TEXT


@dataclass(frozen=True, eq=False)
class Corpus:
    config: CorpusConfig
    seed: int
    renderers: Dict[Modality, ModalityRenderer]
    profiles: Dict[int, SpeakerProfile]
    observations: Dict[int, Dict[Modality, Tuple[Observation, ...]]]
    prompts: Dict[int, Tuple[PromptTokens, ...]]
    train_ids: Tuple[int, ...]
    heldout_ids: Tuple[int, ...]

    def split_ids(self, split: str) -> Tuple[int, ...]:
        if split == "train":
            return self.train_ids
        if split == "heldout":
            return self.heldout_ids
        raise DomainError(f"unknown split '{split}'")

    def class_index(self, speaker_id: int, split: str = "train") -> int:
        return self.split_ids(split).index(speaker_id)

    def digest(self) -> str:
        return hashlib.sha256("".join(corpus_records(self)).encode("utf-8")).hexdigest()


@dataclass
class PairBatch:
    pairing: Pairing
    left: List[Union[Observation, PromptTokens]]
    right: List[Observation]
    speaker_ids: np.ndarray
    labels: np.ndarray

    def __len__(self) -> int:
        return len(self.right)


def stack_features(observations: Sequence[Observation]) -> np.ndarray:
    return np.stack([o.features for o in observations])


# ---------------------------------------------------------------------------
# Generation
# ---------------------------------------------------------------------------


def _render(renderer: ModalityRenderer, z: np.ndarray, speaker_id: int, rng: np.random.Generator) -> Observation:
    identity = renderer.identity_map @ z
    nuisance = rng.normal(scale=renderer.nuisance_scale, size=renderer.nuisance_map.shape[1])
    noise = rng.normal(scale=renderer.noise_scale, size=identity.shape[0])
    return Observation(
        modality=renderer.modality,
        features=identity + renderer.nuisance_map @ nuisance + noise,
        nuisance=nuisance,
        noise=noise,
        identity=identity,
        speaker_id=speaker_id,
        renderer=renderer,
    )


def generate_corpus(config: CorpusConfig, seed: Optional[int] = None) -> Corpus:
    seed = config.seed if seed is None else seed
    if config.n_train_speakers < 2 or config.n_heldout_speakers < 2:
        raise ConfigError("each split needs at least two speakers")
    if config.observations_per_modality < 2:
        raise ConfigError("each speaker needs at least two observations per modality")
    if config.latent_dim < len(ATTRIBUTE_VALUES):
        raise ConfigError(f"latent_dim must be at least {len(ATTRIBUTE_VALUES)} to carry the attributes")

    rng = np.random.default_rng(seed)
    renderers = {}
    for modality in (Modality.SPEECH, Modality.FACE):
        renderers[modality] = ModalityRenderer(
            modality=modality,
            identity_map=rng.normal(size=(config.feature_dim, config.latent_dim)) / np.sqrt(config.latent_dim),
            nuisance_map=rng.normal(size=(config.feature_dim, config.nuisance_dim)) / np.sqrt(config.nuisance_dim),
            nuisance_scale=config.nuisance_scale,
            noise_scale=config.noise_scale,
        )

    n_total = config.n_train_speakers + config.n_heldout_speakers
    train_ids = tuple(range(config.n_train_speakers))
    heldout_ids = tuple(range(config.n_train_speakers, n_total))

    profiles, observations, prompts = {}, {}, {}
    for split in (train_ids, heldout_ids):
        for position, speaker_id in enumerate(split):
            z = rng.normal(size=config.latent_dim)
            # alternate the gender coordinate so both genders occur in every split
            z[0] = abs(z[0]) if position % 2 == 0 else -abs(z[0])
            attributes = SpeakerAttributes.from_latent(z)
            profiles[speaker_id] = SpeakerProfile(speaker_id=speaker_id, latent=z, attributes=attributes)
            observations[speaker_id] = {
                modality: tuple(_render(renderer, z, speaker_id, rng)
                                for _ in range(config.observations_per_modality))
                for modality, renderer in renderers.items()
            }
            prompt_seeds = rng.integers(0, 2**31 - 1, size=config.prompts_per_speaker)
            prompts[speaker_id] = tuple(render_prompt(attributes, int(s), speaker_id) for s in prompt_seeds)

    logging.info(f"Generated corpus: {len(train_ids)} train / {len(heldout_ids)} held-out speakers, seed {seed}")
    return Corpus(config=config, seed=seed, renderers=renderers, profiles=profiles, observations=observations,
                  prompts=prompts, train_ids=train_ids, heldout_ids=heldout_ids)


def render_prompt(attributes: SpeakerAttributes, seed: int, speaker_id: Optional[int] = None) -> PromptTokens:
    """Keyword sequence: one token per attribute plus shuffled filler tokens."""
    rng = np.random.default_rng(seed)
    keywords = attributes.keyword_tokens()
    n_fillers = int(rng.integers(0, MAX_FILLERS + 1))
    fillers = rng.integers(len(KEYWORD_TOKENS), VOCAB_SIZE, size=n_fillers).tolist()
    sequence = rng.permutation(np.array(keywords + fillers, dtype=np.int64))
    return PromptTokens(tokens=tuple(int(t) for t in sequence), speaker_id=speaker_id)


def augment_observation(obs: Observation, strength: float, seed: int) -> Observation:
    """Redraw nuisance and noise around their current values; identity is untouched."""
    if strength < 0:
        raise DomainError(f"augmentation strength must be non-negative, got {strength}")
    if strength == 0:
        return obs
    if obs.renderer is None:
        raise DomainError("observation carries no renderer; cannot augment")
    rng = np.random.default_rng(seed)
    r = obs.renderer
    nuisance = obs.nuisance + strength * rng.normal(scale=r.nuisance_scale, size=obs.nuisance.shape)
    noise = obs.noise + strength * rng.normal(scale=r.noise_scale, size=obs.noise.shape)
    return Observation(
        modality=obs.modality,
        features=obs.identity + r.nuisance_map @ nuisance + noise,
        nuisance=nuisance,
        noise=noise,
        identity=obs.identity,
        speaker_id=obs.speaker_id,
        renderer=r,
    )


def sample_pair_batch(corpus: Corpus, pairing: Union[Pairing, str], n: int, seed: int,
                      split: str = "train") -> PairBatch:
    """Draw n aligned pairs; item i on both sides belongs to the same speaker.

    Speakers are taken from a seeded permutation of the split, repeated if n
    exceeds the split size, so every batch carries at least two labels.
    """
    pairing = Pairing(pairing)
    ids = corpus.split_ids(split)
    if n < 2:
        raise DegenerateInputError(f"batch size must be at least 2, got {n}")
    if len(ids) < 2:
        raise DegenerateInputError(f"split '{split}' has {len(ids)} speaker(s); need two distinct labels")

    rng = np.random.default_rng(seed)
    order = np.concatenate([rng.permutation(ids) for _ in range(-(-n // len(ids)))])[:n]

    left_modality = {Pairing.FACE_SPEECH: Modality.FACE}.get(pairing, Modality.TEXT)
    right_modality = Modality.FACE if pairing == Pairing.TEXT_FACE else Modality.SPEECH
    left, right = [], []
    for speaker_id in order:
        speaker_id = int(speaker_id)
        if left_modality == Modality.TEXT:
            options = corpus.prompts[speaker_id]
        else:
            options = corpus.observations[speaker_id][left_modality]
        left.append(options[int(rng.integers(len(options)))])
        targets = corpus.observations[speaker_id][right_modality]
        right.append(targets[int(rng.integers(len(targets)))])

    labels = np.array([corpus.class_index(int(s), split) for s in order], dtype=np.int64)
    return PairBatch(pairing=pairing, left=left, right=right, speaker_ids=order.astype(np.int64), labels=labels)


# ---------------------------------------------------------------------------
# Line-delimited export / import
# ---------------------------------------------------------------------------


def _line(record: dict) -> str:
    return json.dumps(record, sort_keys=True) + "\n"


def corpus_records(corpus: Corpus):
    yield _line({
        "record": "header",
        "format_version": CORPUS_FORMAT_VERSION,
        "config": corpus.config.model_dump(mode="json"),
        "seed": corpus.seed,
        "train_ids": list(corpus.train_ids),
        "heldout_ids": list(corpus.heldout_ids),
    })
    for modality, r in corpus.renderers.items():
        yield _line({
            "record": "renderer",
            "modality": modality.value,
            "identity_map": r.identity_map.tolist(),
            "nuisance_map": r.nuisance_map.tolist(),
            "nuisance_scale": r.nuisance_scale,
            "noise_scale": r.noise_scale,
        })
    for speaker_id in corpus.train_ids + corpus.heldout_ids:
        p = corpus.profiles[speaker_id]
        yield _line({
            "record": "speaker",
            "speaker_id": speaker_id,
            "latent": p.latent.tolist(),
            "gender": p.attributes.gender,
            "pitch": p.attributes.pitch,
            "tempo": p.attributes.tempo,
        })
        for modality, items in corpus.observations[speaker_id].items():
            for index, obs in enumerate(items):
                yield _line({
                    "record": "observation",
                    "speaker_id": speaker_id,
                    "modality": modality.value,
                    "index": index,
                    "identity": obs.identity.tolist(),
                    "nuisance": obs.nuisance.tolist(),
                    "noise": obs.noise.tolist(),
                    "features": obs.features.tolist(),
                })
        for index, prompt in enumerate(corpus.prompts[speaker_id]):
            yield _line({"record": "prompt", "speaker_id": speaker_id, "index": index, "tokens": list(prompt.tokens)})


def export_corpus(corpus: Corpus, path: str) -> None:
    with open(path, "w", encoding="utf-8", newline="\n") as f:
        for line in corpus_records(corpus):
            f.write(line)
    logging.info(f"Corpus written to {path}")


def import_corpus(path: str) -> Corpus:
    header = None
    renderers: Dict[Modality, ModalityRenderer] = {}
    profiles: Dict[int, SpeakerProfile] = {}
    obs_lists: Dict[int, Dict[Modality, List[Observation]]] = {}
    prompt_lists: Dict[int, List[PromptTokens]] = {}

    with open(path, "r", encoding="utf-8") as f:
        for line_no, line in enumerate(f, start=1):
            if not line.strip():
                continue
            try:
                rec = json.loads(line)
                kind = rec["record"]
                if kind == "header":
                    if rec["format_version"] != CORPUS_FORMAT_VERSION:
                        raise FormatError(f"unsupported corpus format version {rec['format_version']}")
                    header = rec
                elif kind == "renderer":
                    modality = Modality(rec["modality"])
                    renderers[modality] = ModalityRenderer(
                        modality=modality,
                        identity_map=np.array(rec["identity_map"], dtype=np.float64),
                        nuisance_map=np.array(rec["nuisance_map"], dtype=np.float64),
                        nuisance_scale=float(rec["nuisance_scale"]),
                        noise_scale=float(rec["noise_scale"]),
                    )
                elif kind == "speaker":
                    attributes = SpeakerAttributes(rec["gender"], rec["pitch"], rec["tempo"])
                    sid = int(rec["speaker_id"])
                    profiles[sid] = SpeakerProfile(sid, np.array(rec["latent"], dtype=np.float64), attributes)
                elif kind == "observation":
                    modality = Modality(rec["modality"])
                    sid = int(rec["speaker_id"])
                    obs_lists.setdefault(sid, {}).setdefault(modality, []).append(Observation(
                        modality=modality,
                        features=np.array(rec["features"], dtype=np.float64),
                        nuisance=np.array(rec["nuisance"], dtype=np.float64),
                        noise=np.array(rec["noise"], dtype=np.float64),
                        identity=np.array(rec["identity"], dtype=np.float64),
                        speaker_id=sid,
                        renderer=renderers.get(modality),
                    ))
                elif kind == "prompt":
                    sid = int(rec["speaker_id"])
                    prompt_lists.setdefault(sid, []).append(PromptTokens(tuple(rec["tokens"]), sid))
                else:
                    raise FormatError(f"unknown record type '{kind}'")
            except FormatError as e:
                raise FormatError(f"{path}:{line_no}: {e}") from e
            except (KeyError, TypeError, ValueError) as e:
                raise FormatError(f"{path}:{line_no}: malformed corpus record ({e})") from e

    if header is None:
        raise FormatError(f"{path}: missing header record")
    train_ids = tuple(header["train_ids"])
    heldout_ids = tuple(header["heldout_ids"])
    for sid in train_ids + heldout_ids:
        if sid not in profiles or sid not in obs_lists:
            raise FormatError(f"{path}: speaker {sid} has no profile or observations")
    return Corpus(
        config=CorpusConfig.model_validate(header["config"]),
        seed=int(header["seed"]),
        renderers=renderers,
        profiles=profiles,
        observations={sid: {m: tuple(v) for m, v in by_mod.items()} for sid, by_mod in obs_lists.items()},
        prompts={sid: tuple(v) for sid, v in prompt_lists.items()},
        train_ids=train_ids,
        heldout_ids=heldout_ids,
    )
