#!/usr/bin/env python3
"""
Command-line entry point.

    python -m mmspeaker.cli gen-data --config config.yaml --output runs/data
    python -m mmspeaker.cli train    --config config.yaml --stage all --corpus runs/data --checkpoint-dir runs/bundle
    python -m mmspeaker.cli eval     --config config.yaml --bundle runs/bundle --corpus runs/data --report runs/report
    python -m mmspeaker.cli embed    --bundle runs/bundle --input inputs.jsonl --output embeddings.jsonl

Exit codes: 0 success, 1 I/O error, 2 config or input format error,
3 missing prerequisite (stage checkpoint, bundle part), 4 training divergence.
"""

import argparse
import json
import logging
import os
import sys
from contextlib import contextmanager
from typing import List, Literal, Optional

import numpy as np
from pydantic import BaseModel, ConfigDict, ValidationError, model_validator

from .config import RunConfig, config_hash, load_run_config
from .encoders import Modality, encode, encode_text
from .errors import ConfigError, FormatError, PrerequisiteError, StateError, TrainingError, MMSpeakerError
from .evaluation import evaluate, write_det_csv, write_report, write_scores
from .losses import Ablation, effective_weights
from .pipeline import ModelBundle, load_bundle, run_stage, save_bundle
from .synthdata import CORPUS_FORMAT_VERSION, PromptTokens, export_corpus, generate_corpus, import_corpus
from .training_log import TrainingLog

EXIT_OK = 0
EXIT_IO = 1
EXIT_CONFIG = 2
EXIT_PREREQUISITE = 3
EXIT_TRAINING = 4

CORPUS_FILE = "corpus.jsonl"
MANIFEST_FILE = "manifest.json"
TRAINING_LOG_FILE = "training_log.jsonl"
LOCK_FILE = ".lock"
STAGE_ORDER = ("0", "1", "2")


# ---------------------------------------------------------------------------
# Helpers
# ---------------------------------------------------------------------------


@contextmanager
def _locked(directory: str):
    """Exclusive writer lock on an output directory."""
    os.makedirs(directory, exist_ok=True)
    path = os.path.join(directory, LOCK_FILE)
    try:
        fd = os.open(path, os.O_CREAT | os.O_EXCL | os.O_WRONLY)
    except FileExistsError:
        raise OSError(f"{directory} is locked by another run (remove {path} if stale)")
    os.close(fd)
    try:
        yield
    finally:
        os.remove(path)


def _write_manifest(directory: str, manifest: dict) -> None:
    with open(os.path.join(directory, MANIFEST_FILE), "w", encoding="utf-8", newline="\n") as f:
        json.dump(manifest, f, indent=2, sort_keys=True)
        f.write("\n")


def _config_echo(cfg: RunConfig) -> dict:
    return {
        "config": cfg.model_dump(mode="json"),
        "config_hash": config_hash(cfg),
        "seeds": {
            "global": cfg.seed,
            "corpus": cfg.corpus_config().seed,
            "train": cfg.train_config().seed,
            "eval": cfg.eval_config().seed,
        },
    }


def _corpus_path(path: str) -> str:
    return os.path.join(path, CORPUS_FILE) if os.path.isdir(path) else path


# ---------------------------------------------------------------------------
# Commands
# ---------------------------------------------------------------------------


def cmd_gen_data(args) -> int:
    cfg = load_run_config(args.config)
    output = args.output or os.path.dirname(cfg.paths.corpus) or "."
    corpus = generate_corpus(cfg.corpus_config())
    with _locked(output):
        export_corpus(corpus, os.path.join(output, CORPUS_FILE))
        _write_manifest(output, {
            **_config_echo(cfg),
            "command": "gen-data",
            "format_version": CORPUS_FORMAT_VERSION,
            "corpus_digest": corpus.digest(),
        })
    logging.info(f"Corpus of {len(corpus.train_ids) + len(corpus.heldout_ids)} speakers written to {output}")
    return EXIT_OK


def _stages_for(stage: str) -> List[str]:
    return list(STAGE_ORDER) if stage == "all" else [stage]


def cmd_train(args) -> int:
    cfg = load_run_config(args.config)
    train_cfg = cfg.train_config()
    checkpoint_dir = args.checkpoint_dir or cfg.paths.checkpoint_dir
    ablation = Ablation(args.ablate or Ablation.FULL.value)
    stages = _stages_for(args.stage)

    if stages[0] == "0":
        bundle = ModelBundle()
    else:
        bundle = load_bundle(checkpoint_dir)
        required = STAGE_ORDER[int(stages[0]) - 1]
        if required not in bundle.stages:
            raise PrerequisiteError(f"stage {stages[0]} needs a stage-{required} checkpoint in {checkpoint_dir}")

    corpus = import_corpus(_corpus_path(args.corpus or cfg.paths.corpus))
    with _locked(checkpoint_dir):
        with TrainingLog(os.path.join(checkpoint_dir, TRAINING_LOG_FILE)) as log:
            for stage in stages:
                logging.info(f"Running stage {stage}")
                bundle = run_stage(stage, corpus, bundle, train_cfg, ablation, log)
        bundle.manifest.update({
            **_config_echo(cfg),
            "command": "train",
            "ablation": ablation.value,
            "effective_weights": effective_weights(train_cfg.loss, ablation),
            "corpus_digest": corpus.digest(),
        })
        save_bundle(bundle, checkpoint_dir)
    return EXIT_OK


def cmd_eval(args) -> int:
    cfg = load_run_config(args.config)
    bundle = load_bundle(args.bundle or cfg.paths.checkpoint_dir)
    corpus = import_corpus(_corpus_path(args.corpus or cfg.paths.corpus))
    report_dir = args.report or cfg.paths.report_dir
    fingerprints = {"config_hash": config_hash(cfg)}
    if "config_hash" in bundle.manifest:
        fingerprints["bundle_config_hash"] = bundle.manifest["config_hash"]

    result = evaluate(corpus, bundle, cfg.eval_config(), fingerprints)
    with _locked(report_dir):
        write_report(result.report, os.path.join(report_dir, "report.json"))
        write_det_csv(result.det, os.path.join(report_dir, "det.csv"))
        write_scores(result.scores, os.path.join(report_dir, "scores.jsonl"))
        _write_manifest(report_dir, {**_config_echo(cfg), "command": "eval", "corpus_digest": corpus.digest()})
    logging.info(f"Report written to {report_dir}")
    return EXIT_OK


class EmbedInput(BaseModel):
    """One line of the embed input file."""

    model_config = ConfigDict(extra="forbid")

    modality: Literal["speech", "face", "text"]
    features: Optional[List[float]] = None
    tokens: Optional[List[int]] = None
    speaker_id: Optional[int] = None

    @model_validator(mode="after")
    def _check_payload(self):
        if self.modality == "text" and (self.tokens is None or self.features is not None):
            raise ValueError("text inputs carry 'tokens' only")
        if self.modality != "text" and (self.features is None or self.tokens is not None):
            raise ValueError(f"{self.modality} inputs carry 'features' only")
        return self


def _embedding_line(modality: str, speaker_id: Optional[int], values: np.ndarray) -> str:
    numbers = ", ".join(f"{v:.17g}" for v in values)
    sid = "null" if speaker_id is None else str(int(speaker_id))
    return f'{{"modality": "{modality}", "speaker_id": {sid}, "values": [{numbers}]}}\n'


def _embed_line(request: EmbedInput, bundle: ModelBundle) -> np.ndarray:
    if request.modality == "text":
        prompt = PromptTokens(tuple(request.tokens), request.speaker_id)
        return encode_text(bundle.encoder_for(Modality.TEXT), prompt.tokens)[0].values
    return encode(bundle.encoder_for(Modality(request.modality)), np.array(request.features))[0].values


def cmd_embed(args) -> int:
    bundle = load_bundle(args.bundle)
    lines = []
    with open(args.input, "r", encoding="utf-8") as f:
        for line_no, line in enumerate(f, start=1):
            if not line.strip():
                continue
            try:
                request = EmbedInput.model_validate_json(line)
                values = _embed_line(request, bundle)
            except (ValidationError, ValueError) as e:
                raise FormatError(f"{args.input}: line {line_no}: {e}") from e
            lines.append(_embedding_line(request.modality, request.speaker_id, values))
    with open(args.output, "w", encoding="utf-8", newline="\n") as f:
        f.writelines(lines)
    logging.info(f"Wrote {len(lines)} embeddings to {args.output}")
    return EXIT_OK


# ---------------------------------------------------------------------------
# Entry point
# ---------------------------------------------------------------------------


def build_parser() -> argparse.ArgumentParser:
    parser = argparse.ArgumentParser(
        prog="mmspeaker",
        description="Align speech, face and text-prompt speaker embeddings on a synthetic corpus.",
    )
    parser.add_argument("--verbose", action="store_true", help="Enable verbose logging.")
    sub = parser.add_subparsers(dest="command", required=True)

    gen = sub.add_parser("gen-data", help="Generate a synthetic corpus.")
    gen.add_argument("--config", type=str, default=None, help="Run config (YAML). Defaults apply when omitted.")
    gen.add_argument("--output", type=str, default=None, help="Output directory for corpus.jsonl and manifest.json.")
    gen.set_defaults(func=cmd_gen_data)

    train = sub.add_parser("train", help="Run one training stage or all of them.")
    train.add_argument("--config", type=str, default=None)
    train.add_argument("--stage", choices=["0", "1", "2", "all"], default="all")
    train.add_argument("--corpus", type=str, default=None, help="Corpus file or gen-data output directory.")
    train.add_argument("--checkpoint-dir", type=str, default=None, help="Bundle directory to read and write.")
    train.add_argument("--ablate", choices=[a.value for a in Ablation if a != Ablation.FULL], default=None,
                       help="Drop one stage-1 loss term.")
    train.set_defaults(func=cmd_train)

    ev = sub.add_parser("eval", help="Evaluate a bundle on the held-out speakers.")
    ev.add_argument("--config", type=str, default=None)
    ev.add_argument("--bundle", type=str, default=None)
    ev.add_argument("--corpus", type=str, default=None)
    ev.add_argument("--report", type=str, default=None, help="Output directory for report.json, det.csv, scores.jsonl.")
    ev.set_defaults(func=cmd_eval)

    emb = sub.add_parser("embed", help="Embed observations or prompts read from a line-delimited JSON file.")
    emb.add_argument("--bundle", type=str, required=True)
    emb.add_argument("--input", type=str, required=True)
    emb.add_argument("--output", type=str, required=True)
    emb.set_defaults(func=cmd_embed)
    return parser


def main(argv: Optional[List[str]] = None) -> int:
    args = build_parser().parse_args(argv)
    logging.basicConfig(level=logging.DEBUG if args.verbose else logging.INFO)

    try:
        return args.func(args)
    except (ConfigError, FormatError) as e:
        logging.error(str(e))
        return EXIT_CONFIG
    except (PrerequisiteError, StateError) as e:
        logging.error(str(e))
        return EXIT_PREREQUISITE
    except TrainingError as e:
        logging.error(f"Training diverged in {e.stage} at step {e.step}: {e}")
        return EXIT_TRAINING
    except OSError as e:
        logging.error(str(e))
        return EXIT_IO
    except MMSpeakerError as e:
        logging.error(str(e))
        return EXIT_CONFIG


if __name__ == "__main__":
    sys.exit(main())
