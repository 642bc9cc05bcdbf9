"""Append-only line-delimited training log, one JSON object per logged step."""

import json
import logging
import os
from typing import Dict, List, Optional

LOG_KEYS = ("stage", "step", "l_ce", "l_kd", "l_cl", "total")


def _get_or_create_logger(path: str) -> logging.Logger:
    """Get or create the dedicated file logger for one training log path."""
    logger_name = f"mmspeaker.train.{os.path.abspath(path)}"

    if logger_name in logging.Logger.manager.loggerDict:
        return logging.getLogger(logger_name)

    logger = logging.getLogger(logger_name)
    logger.setLevel(logging.INFO)

    file_handler = logging.FileHandler(path, mode="a", encoding="utf-8")
    file_handler.setLevel(logging.INFO)
    # bare message: records carry no wall-clock fields so reruns are byte-identical
    file_handler.setFormatter(logging.Formatter("%(message)s"))

    logger.addHandler(file_handler)
    logger.propagate = False
    return logger


class TrainingLog:
    """Collects loss records in memory and, when given a path, appends them to disk."""

    def __init__(self, path: Optional[str] = None):
        self.path = path
        self.records: List[Dict] = []
        self._logger = _get_or_create_logger(path) if path else None

    def record(self, stage: str, step: int, total: float, l_ce: float = 0.0,
               l_kd: float = 0.0, l_cl: float = 0.0) -> Dict:
        entry = {
            "stage": stage,
            "step": int(step),
            "l_ce": float(l_ce),
            "l_kd": float(l_kd),
            "l_cl": float(l_cl),
            "total": float(total),
        }
        self.records.append(entry)
        if self._logger is not None:
            self._logger.info(json.dumps(entry, sort_keys=True))
        return entry

    def for_stage(self, stage: str) -> List[Dict]:
        return [r for r in self.records if r["stage"] == stage]

    def close(self) -> None:
        if self._logger is None:
            return
        for handler in list(self._logger.handlers):
            handler.flush()
            handler.close()
            self._logger.removeHandler(handler)
        logging.Logger.manager.loggerDict.pop(self._logger.name, None)
        self._logger = None

    def __enter__(self):
        return self

    def __exit__(self, *exc):
        self.close()
        return False


def read_training_log(path: str) -> List[Dict]:
    with open(path, "r", encoding="utf-8") as f:
        return [json.loads(line) for line in f if line.strip()]
