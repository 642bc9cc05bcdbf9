import numpy as np
import pytest

from mmspeaker.config import CorpusConfig
from mmspeaker.encoders import Modality
from mmspeaker.errors import ConfigError, DegenerateInputError, DomainError, FormatError
from mmspeaker.numerics import cosine_matrix
from mmspeaker.synthdata import (
    KEYWORD_TOKENS,
    MAX_PROMPT_LENGTH,
    VOCAB_SIZE,
    Pairing,
    SpeakerAttributes,
    augment_observation,
    export_corpus,
    generate_corpus,
    import_corpus,
    render_prompt,
    sample_pair_batch,
    stack_features,
)


def test_generation_is_deterministic(small_corpus_config):
    a = generate_corpus(small_corpus_config)
    b = generate_corpus(small_corpus_config)
    assert a.digest() == b.digest()
    assert generate_corpus(small_corpus_config, seed=8).digest() != a.digest()


def test_default_sizes_and_disjoint_splits():
    corpus = generate_corpus(CorpusConfig(observations_per_modality=2, prompts_per_speaker=1))
    ids = set(corpus.train_ids) | set(corpus.heldout_ids)
    assert len(ids) == 80
    assert len(corpus.train_ids) == 64 and len(corpus.heldout_ids) == 16
    assert not set(corpus.train_ids) & set(corpus.heldout_ids)
    for sid, by_modality in corpus.observations.items():
        assert sid in corpus.profiles
        for items in by_modality.values():
            assert all(o.speaker_id == sid for o in items)


def test_both_genders_in_each_split(small_corpus):
    for split in (small_corpus.train_ids, small_corpus.heldout_ids):
        genders = {small_corpus.profiles[s].attributes.gender for s in split}
        assert genders == {"A", "B"}


def test_zero_noise_renders_identical_observations(small_corpus_config):
    corpus = generate_corpus(small_corpus_config.model_copy(update={"noise_scale": 0.0, "nuisance_scale": 0.0}))
    for by_modality in corpus.observations.values():
        for items in by_modality.values():
            for obs in items[1:]:
                np.testing.assert_array_equal(obs.features, items[0].features)


def test_observation_model_decomposes(small_corpus):
    for by_modality in small_corpus.observations.values():
        for obs in by_modality[Modality.FACE]:
            r = obs.renderer
            np.testing.assert_allclose(obs.features, obs.identity + r.nuisance_map @ obs.nuisance + obs.noise, atol=1e-12)


def test_unsatisfiable_config_is_rejected(small_corpus_config):
    with pytest.raises(ConfigError):
        generate_corpus(small_corpus_config.model_copy(update={"n_heldout_speakers": 1}))
    with pytest.raises(ConfigError):
        generate_corpus(small_corpus_config.model_copy(update={"observations_per_modality": 1}))


def test_same_speaker_features_are_more_similar():
    corpus = generate_corpus(CorpusConfig(n_train_speakers=12, n_heldout_speakers=4, noise_scale=0.01,
                                          nuisance_scale=0.01, observations_per_modality=3, seed=5))
    obs = [o for sid in corpus.train_ids for o in corpus.observations[sid][Modality.SPEECH]]
    ids = np.array([o.speaker_id for o in obs])
    sims = cosine_matrix(stack_features(obs))
    same = ids[:, None] == ids[None, :]
    off_diagonal = ~np.eye(len(obs), dtype=bool)
    assert sims[same & off_diagonal].mean() > sims[~same].mean()


def test_prompt_contains_every_attribute_keyword():
    attributes = SpeakerAttributes("A", "low", "slow")
    expected = {KEYWORD_TOKENS[("gender", "A")], KEYWORD_TOKENS[("pitch", "low")], KEYWORD_TOKENS[("tempo", "slow")]}
    for seed in (1, 2):
        prompt = render_prompt(attributes, seed)
        assert expected <= set(prompt.tokens)
        keywords = [t for t in prompt.tokens if t < len(KEYWORD_TOKENS)]
        assert sorted(keywords) == sorted(expected)


def test_prompt_is_deterministic():
    attributes = SpeakerAttributes("B", "high", "mid")
    assert render_prompt(attributes, 42) == render_prompt(attributes, 42)


def test_prompt_vocabulary_audit():
    values = [("A", "low", "slow"), ("B", "mid", "fast"), ("A", "high", "mid")]
    for seed in range(1000):
        prompt = render_prompt(SpeakerAttributes(*values[seed % 3]), seed)
        assert 0 < len(prompt.tokens) <= MAX_PROMPT_LENGTH
        assert all(0 <= t < VOCAB_SIZE for t in prompt.tokens)


def test_attributes_reject_unknown_values():
    with pytest.raises(DomainError):
        SpeakerAttributes("C", "low", "slow")


def test_two_speaker_batch_has_one_pair_each():
    corpus = generate_corpus(CorpusConfig(n_train_speakers=2, n_heldout_speakers=2, observations_per_modality=2,
                                          prompts_per_speaker=1))
    batch = sample_pair_batch(corpus, Pairing.FACE_SPEECH, 2, seed=0)
    assert sorted(batch.speaker_ids.tolist()) == [0, 1]
    for left, right, sid in zip(batch.left, batch.right, batch.speaker_ids):
        assert left.speaker_id == right.speaker_id == sid
        assert left.modality is Modality.FACE and right.modality is Modality.SPEECH


def test_pair_batches_are_deterministic(small_corpus):
    a = sample_pair_batch(small_corpus, "text-speech", 5, seed=3)
    b = sample_pair_batch(small_corpus, "text-speech", 5, seed=3)
    assert a.left == b.left
    assert [o.features.tobytes() for o in a.right] == [o.features.tobytes() for o in b.right]
    np.testing.assert_array_equal(a.labels, b.labels)


@pytest.mark.parametrize("pairing", list(Pairing))
def test_pair_batches_always_have_two_labels(small_corpus, pairing):
    for seed in range(1000):
        batch = sample_pair_batch(small_corpus, pairing, 2 + seed % 9, seed)
        assert len(set(batch.labels.tolist())) >= 2
        assert all(l.speaker_id == r.speaker_id for l, r in zip(batch.left, batch.right))
        assert set(batch.speaker_ids.tolist()) <= set(small_corpus.train_ids)


def test_pair_batch_rejects_single_item(small_corpus):
    with pytest.raises(DegenerateInputError):
        sample_pair_batch(small_corpus, Pairing.FACE_SPEECH, 1, seed=0)


def test_heldout_batches_use_heldout_speakers(small_corpus):
    batch = sample_pair_batch(small_corpus, Pairing.TEXT_FACE, 4, seed=1, split="heldout")
    assert set(batch.speaker_ids.tolist()) <= set(small_corpus.heldout_ids)


def test_augment_strength_zero_is_identity(small_corpus):
    obs = small_corpus.observations[0][Modality.FACE][0]
    assert augment_observation(obs, 0.0, seed=5) is obs


def test_augment_keeps_identity_component(small_corpus):
    obs = small_corpus.observations[0][Modality.FACE][0]
    a = augment_observation(obs, 1.0, seed=5)
    b = augment_observation(obs, 1.0, seed=6)
    assert not np.allclose(a.features, obs.features)
    assert not np.allclose(a.nuisance, b.nuisance)
    for aug in (a, b):
        assert aug.speaker_id == obs.speaker_id
        np.testing.assert_array_equal(aug.identity, obs.identity)
        r = aug.renderer
        np.testing.assert_allclose(aug.features - r.nuisance_map @ aug.nuisance - aug.noise, obs.identity, atol=1e-12)


def test_augment_rejects_negative_strength(small_corpus):
    with pytest.raises(DomainError):
        augment_observation(small_corpus.observations[0][Modality.SPEECH][0], -0.5, seed=1)


def test_export_import_round_trip(small_corpus, tmp_path):
    path = tmp_path / "corpus.jsonl"
    export_corpus(small_corpus, str(path))
    loaded = import_corpus(str(path))
    assert loaded.digest() == small_corpus.digest()
    assert loaded.train_ids == small_corpus.train_ids
    original = small_corpus.observations[3][Modality.SPEECH][1]
    restored = loaded.observations[3][Modality.SPEECH][1]
    assert restored.features.tobytes() == original.features.tobytes()
    assert loaded.prompts[3] == small_corpus.prompts[3]

    second = tmp_path / "again.jsonl"
    export_corpus(loaded, str(second))
    assert second.read_bytes() == path.read_bytes()


def test_import_reports_bad_lines(small_corpus, tmp_path):
    path = tmp_path / "corpus.jsonl"
    export_corpus(small_corpus, str(path))
    lines = path.read_text().splitlines(keepends=True)
    lines[4] = "{not json\n"
    path.write_text("".join(lines))
    with pytest.raises(FormatError, match=":5:"):
        import_corpus(str(path))
