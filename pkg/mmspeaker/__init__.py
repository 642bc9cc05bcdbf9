"""mmspeaker package."""

# Import and expose the main functionality
from .config import LossConfig, CorpusConfig, TrainConfig, EvalConfig, PathsConfig, RunConfig, load_run_config
from .encoders import Modality, Embedding, MlpEncoder, TeacherEncoder, TextEncoder, encode, encode_text, backprop
from .losses import (
    Ablation,
    ClassifierWeights,
    SimilarityMatrix,
    shared_weight_ce,
    teacher_similarity,
    fuse_similarity,
    kd_loss,
    contrastive_loss,
    stage1_loss,
    text_alignment_loss,
)
from .numerics import AdamState, l2_normalize, cosine_similarity, adam_step, check_gradient
from .synthdata import Corpus, Observation, PromptTokens, generate_corpus, render_prompt, sample_pair_batch, augment_observation
from .pipeline import (
    ModelBundle,
    pretrain_speech_encoder,
    train_face_encoder,
    train_text_encoder,
    embed_any,
    save_bundle,
    load_bundle,
    run_ablation,
)
from .evaluation import (
    TrialSet,
    ScoreSet,
    EvalReport,
    build_trials,
    compute_eer,
    compute_min_dcf,
    det_points,
    silhouette_score,
    evaluate_bundle,
)

__all__ = [
    'LossConfig',
    'CorpusConfig',
    'TrainConfig',
    'EvalConfig',
    'PathsConfig',
    'RunConfig',
    'load_run_config',
    'Modality',
    'Embedding',
    'MlpEncoder',
    'TeacherEncoder',
    'TextEncoder',
    'encode',
    'encode_text',
    'backprop',
    'Ablation',
    'ClassifierWeights',
    'SimilarityMatrix',
    'shared_weight_ce',
    'teacher_similarity',
    'fuse_similarity',
    'kd_loss',
    'contrastive_loss',
    'stage1_loss',
    'text_alignment_loss',
    'AdamState',
    'l2_normalize',
    'cosine_similarity',
    'adam_step',
    'check_gradient',
    'Corpus',
    'Observation',
    'PromptTokens',
    'generate_corpus',
    'render_prompt',
    'sample_pair_batch',
    'augment_observation',
    'ModelBundle',
    'pretrain_speech_encoder',
    'train_face_encoder',
    'train_text_encoder',
    'embed_any',
    'save_bundle',
    'load_bundle',
    'run_ablation',
    'TrialSet',
    'ScoreSet',
    'EvalReport',
    'build_trials',
    'compute_eer',
    'compute_min_dcf',
    'det_points',
    'silhouette_score',
    'evaluate_bundle',
]
