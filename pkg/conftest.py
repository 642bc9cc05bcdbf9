import numpy as np
import pytest

from mmspeaker.config import CorpusConfig, EvalConfig, LossConfig, TrainConfig
from mmspeaker.encoders import Modality, TeacherEncoder, init_mlp, student_from_teacher
from mmspeaker.pipeline import ModelBundle
from mmspeaker.synthdata import generate_corpus


@pytest.fixture
def rng():
    return np.random.default_rng(1234)


@pytest.fixture
def small_corpus_config():
    return CorpusConfig(
        n_train_speakers=6,
        n_heldout_speakers=4,
        latent_dim=6,
        feature_dim=8,
        nuisance_dim=2,
        observations_per_modality=4,
        prompts_per_speaker=2,
        seed=7,
    )


@pytest.fixture
def small_corpus(small_corpus_config):
    return generate_corpus(small_corpus_config)


@pytest.fixture
def small_train_config():
    return TrainConfig(
        steps=20,
        batch_size=6,
        text_batch_size=4,
        learning_rate=0.01,
        seed=3,
        log_every=5,
        embedding_dim=4,
        hidden=[8],
        text_width=8,
        loss=LossConfig(),
    )


@pytest.fixture
def small_eval_config():
    return EvalConfig(trials_per_speaker=3, seed=11, silhouette_source="faces")


@pytest.fixture
def random_bundle(small_corpus, small_train_config):
    """Untrained bundle with speech, face teacher and face encoders."""
    gen = np.random.default_rng(99)
    dim, d = small_corpus.config.feature_dim, small_train_config.embedding_dim
    speech = TeacherEncoder.freeze(init_mlp(dim, d, [8], gen, modality=Modality.SPEECH))
    face_teacher = TeacherEncoder.freeze(init_mlp(dim, d, [8], gen, modality=Modality.FACE))
    return ModelBundle(speech=speech, face_teacher=face_teacher, face=student_from_teacher(face_teacher))
