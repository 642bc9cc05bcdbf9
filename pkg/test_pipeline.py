import json

import numpy as np
import pytest

from mmspeaker import pipeline
from mmspeaker.encoders import Embedding, Modality, encode_batch
from mmspeaker.errors import ConfigError, FormatError, PrerequisiteError, StateError, TrainingError
from mmspeaker.losses import Ablation
from mmspeaker.pipeline import (
    BUNDLE_FILES,
    MANIFEST_NAME,
    ModelBundle,
    embed_any,
    embed_many,
    load_bundle,
    pretrain,
    pretrain_speech_encoder,
    run_ablation,
    run_stage,
    save_bundle,
    train_face_encoder,
    train_text_encoder,
)
from mmspeaker.synthdata import stack_features
from mmspeaker.training_log import TrainingLog, read_training_log


def _param_bytes(encoder):
    return {k: v.tobytes() for k, v in encoder.params().items()}


def test_zero_steps_is_a_config_error(small_corpus, small_train_config):
    cfg = small_train_config.model_copy(update={"steps": 0})
    with pytest.raises(ConfigError):
        pretrain(small_corpus, cfg)


def test_pretrain_is_deterministic(small_corpus, small_train_config):
    a = pretrain(small_corpus, small_train_config)
    b = pretrain(small_corpus, small_train_config)
    assert _param_bytes(a.speech) == _param_bytes(b.speech)
    assert _param_bytes(a.face_teacher) == _param_bytes(b.face_teacher)
    assert a.classifier.W.tobytes() == b.classifier.W.tobytes()
    assert a.stages == ["0"]

    c = pretrain(small_corpus, small_train_config.model_copy(update={"seed": 4}))
    assert _param_bytes(a.speech) != _param_bytes(c.speech)


def test_pretrain_probe_loss_decreases(small_corpus, small_train_config):
    cfg = small_train_config.model_copy(update={"steps": 150})
    _, _, result = pretrain_speech_encoder(small_corpus, cfg)
    assert result.final_loss < result.initial_loss


def test_pretrained_speech_separates_train_speakers(small_corpus, small_train_config):
    cfg = small_train_config.model_copy(update={"steps": 150})
    speech, _, _ = pretrain_speech_encoder(small_corpus, cfg)
    bundle = ModelBundle(speech=speech)
    emb, labels = [], []
    for sid in small_corpus.train_ids:
        obs = small_corpus.observations[sid][Modality.SPEECH]
        emb.append(embed_many(obs, bundle))
        labels += [sid] * len(obs)
    emb = np.vstack(emb)
    labels = np.asarray(labels)
    cos = emb @ emb.T
    same = (labels[:, None] == labels[None, :]) & ~np.eye(len(labels), dtype=bool)
    different = labels[:, None] != labels[None, :]
    assert cos[same].mean() > cos[different].mean()


def test_pretrained_encoders_are_frozen(small_corpus, small_train_config):
    bundle = pretrain(small_corpus, small_train_config)
    with pytest.raises(ValueError):
        bundle.speech.network.weights[0][0, 0] = 0.0


def test_stage1_leaves_teachers_bitwise_unchanged(small_corpus, small_train_config):
    bundle = pretrain(small_corpus, small_train_config)
    speech_before = _param_bytes(bundle.speech)
    teacher_before = _param_bytes(bundle.face_teacher)
    face, _, _ = train_face_encoder(small_corpus, bundle, small_train_config)
    assert _param_bytes(bundle.speech) == speech_before
    assert _param_bytes(bundle.face_teacher) == teacher_before
    assert _param_bytes(face) != teacher_before


def test_stage1_with_only_face_ce(small_corpus, small_train_config):
    loss = small_train_config.loss.model_copy(update={"gamma": 0.0, "alpha": 0.0, "cl_weight": 0.0})
    cfg = small_train_config.model_copy(update={"loss": loss})
    bundle = pretrain(small_corpus, cfg)
    log = TrainingLog()
    train_face_encoder(small_corpus, bundle, cfg, log=log)
    records = log.for_stage("stage1")
    assert records
    for r in records:
        assert r["l_kd"] == 0.0 and r["l_cl"] == 0.0
        assert r["total"] == pytest.approx(r["l_ce"], abs=1e-12)


def test_no_ce_ablation_keeps_classifier(small_corpus, small_train_config):
    bundle = pretrain(small_corpus, small_train_config)
    _, weights, result = train_face_encoder(small_corpus, bundle, small_train_config, Ablation.NO_CE)
    np.testing.assert_allclose(weights.W, bundle.classifier.W, atol=1e-12)
    assert np.isfinite(result.final_loss)


def test_stage1_requires_stage0(small_corpus, small_train_config):
    with pytest.raises(PrerequisiteError):
        train_face_encoder(small_corpus, ModelBundle(), small_train_config)


def test_stage2_requires_stage1(small_corpus, small_train_config):
    bundle = pretrain(small_corpus, small_train_config)
    with pytest.raises(PrerequisiteError):
        train_text_encoder(small_corpus, bundle, small_train_config)


@pytest.mark.parametrize("text_pairs", ["both", "face", "speech"])
def test_stage2_trains_text_encoder(small_corpus, random_bundle, small_train_config, text_pairs):
    cfg = small_train_config.model_copy(update={"text_pairs": text_pairs})
    text, result = train_text_encoder(small_corpus, random_bundle, cfg)
    assert np.isfinite(result.initial_loss) and np.isfinite(result.final_loss)
    bundle = ModelBundle(speech=random_bundle.speech, face_teacher=random_bundle.face_teacher,
                         face=random_bundle.face, text=text)
    emb = embed_many(small_corpus.prompts[0], bundle)
    assert emb.shape == (len(small_corpus.prompts[0]), cfg.embedding_dim)
    np.testing.assert_allclose(np.linalg.norm(emb, axis=1), 1.0, atol=1e-12)


def test_non_finite_loss_raises_training_error(small_corpus, small_train_config, monkeypatch):
    def nan_loss(features, labels, weights, margin, scale):
        return float("nan"), np.zeros_like(features), np.zeros_like(weights.W)

    monkeypatch.setattr(pipeline, "am_softmax_loss", nan_loss)
    with pytest.raises(TrainingError) as info:
        pretrain(small_corpus, small_train_config)
    assert info.value.stage == "stage0_speech"
    assert info.value.step == 0


def test_embed_any_routes_by_modality(small_corpus, random_bundle):
    speech = small_corpus.observations[0][Modality.SPEECH][0]
    face = small_corpus.observations[0][Modality.FACE][0]
    a = embed_any(speech, random_bundle)
    b = embed_any(face, random_bundle)
    assert isinstance(a, Embedding) and a.modality is Modality.SPEECH
    assert b.modality is Modality.FACE
    expected, _ = encode_batch(random_bundle.face, stack_features([face]))
    np.testing.assert_allclose(b.values, expected[0], atol=1e-12)


def test_embed_prompt_without_text_encoder(small_corpus, random_bundle):
    with pytest.raises(StateError):
        embed_any(small_corpus.prompts[0][0], random_bundle)
    with pytest.raises(StateError):
        embed_any("not an input", random_bundle)


def test_embed_many_rejects_mixed_modalities(small_corpus, random_bundle):
    items = [small_corpus.observations[0][Modality.SPEECH][0], small_corpus.observations[0][Modality.FACE][0]]
    with pytest.raises(StateError):
        embed_many(items, random_bundle)


def test_bundle_round_trip(small_corpus, random_bundle, tmp_path):
    save_bundle(random_bundle, str(tmp_path))
    loaded = load_bundle(str(tmp_path))
    assert loaded.stages == random_bundle.stages
    assert loaded.manifest["stages"] == ["0", "1"]
    assert not (tmp_path / BUNDLE_FILES["text"]).exists()
    obs = small_corpus.observations[2][Modality.FACE]
    assert embed_many(obs, loaded).tobytes() == embed_many(obs, random_bundle).tobytes()
    assert _param_bytes(loaded.face_teacher) == _param_bytes(random_bundle.face_teacher)


def test_bundle_detects_corruption(random_bundle, tmp_path):
    save_bundle(random_bundle, str(tmp_path))
    path = tmp_path / BUNDLE_FILES["face"]
    data = bytearray(path.read_bytes())
    data[len(data) // 2] ^= 0x01
    path.write_bytes(bytes(data))
    with pytest.raises(FormatError):
        load_bundle(str(tmp_path))


def test_saving_fewer_parts_removes_stale_files(random_bundle, tmp_path):
    save_bundle(random_bundle, str(tmp_path))
    stage0 = ModelBundle(speech=random_bundle.speech, face_teacher=random_bundle.face_teacher)
    save_bundle(stage0, str(tmp_path))
    assert not (tmp_path / BUNDLE_FILES["face"]).exists()
    loaded = load_bundle(str(tmp_path))
    assert loaded.stages == ["0"]
    assert loaded.face is None


def test_listed_part_must_exist(random_bundle, tmp_path):
    save_bundle(random_bundle, str(tmp_path))
    (tmp_path / BUNDLE_FILES["face"]).unlink()
    with pytest.raises(FormatError, match="face"):
        load_bundle(str(tmp_path))


def test_unlisted_files_are_ignored(random_bundle, tmp_path):
    save_bundle(random_bundle, str(tmp_path))
    manifest = json.loads((tmp_path / MANIFEST_NAME).read_text())
    manifest["parts"] = ["face_teacher", "speech"]
    (tmp_path / MANIFEST_NAME).write_text(json.dumps(manifest))
    assert load_bundle(str(tmp_path)).face is None
    manifest["parts"] = ["speech", "vision"]
    (tmp_path / MANIFEST_NAME).write_text(json.dumps(manifest))
    with pytest.raises(FormatError, match="parts"):
        load_bundle(str(tmp_path))


def test_missing_bundle_is_a_prerequisite_error(tmp_path):
    with pytest.raises(PrerequisiteError):
        load_bundle(str(tmp_path))
    (tmp_path / MANIFEST_NAME).write_text('{"format_version": 99}')
    with pytest.raises(FormatError):
        load_bundle(str(tmp_path))


def test_run_stage_chains_and_logs(small_corpus, small_train_config, tmp_path):
    path = tmp_path / "training_log.jsonl"
    with TrainingLog(str(path)) as log:
        bundle = ModelBundle()
        for stage in ("0", "1", "2"):
            bundle = run_stage(stage, small_corpus, bundle, small_train_config, log=log)
    assert bundle.stages == ["0", "1", "2"]
    records = read_training_log(str(path))
    assert {r["stage"] for r in records} == {"stage0_speech", "stage0_face", "stage1", "stage2"}
    assert [r["step"] for r in records if r["stage"] == "stage1"] == [0, 5, 10, 15, 19]
    with pytest.raises(ConfigError):
        run_stage("3", small_corpus, bundle, small_train_config)


def test_run_ablation_reports_every_variant(small_corpus, small_train_config, small_eval_config):
    cfg = small_train_config.model_copy(update={"steps": 5})
    report = run_ablation(small_corpus, [0, 1], cfg, small_eval_config)
    assert set(report.eer) == {v.value for v in Ablation}
    assert all(len(values) == 2 for values in report.eer.values())
    assert report.effective_weights["no-kd"]["kd"] == 0.0
    assert 0.0 <= report.median_eer("full") <= 1.0
    assert report.median_min_dcf("full") == pytest.approx(np.mean(report.min_dcf["full"]))
    assert report.median_min_dcf("no-cl") >= 0.0
