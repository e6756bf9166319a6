from __future__ import annotations

import math
from dataclasses import dataclass, field
from typing import Callable

import numpy as np

from .data import SyllogismDataset
from .model import ModelWeights, iter_batches, run_batched


@dataclass(frozen=True)
class LogitDiff:
    value: float
    correct_id: int
    incorrect_id: int


def logit_diff(logits: np.ndarray, correct_id: int, incorrect_id: int) -> LogitDiff:
    """logit(correct) - logit(incorrect) at the final position.

    ``logits`` may be a single vocabulary row or a ``(pos, vocab)`` matrix.
    """
    if correct_id == incorrect_id:
        raise ValueError("correct and incorrect ids must differ")
    row = np.asarray(logits)
    if row.ndim == 2:
        row = row[-1]
    return LogitDiff(float(row[correct_id]) - float(row[incorrect_id]), int(correct_id), int(incorrect_id))


def logit_diffs(final_logits: np.ndarray, correct: np.ndarray, incorrect: np.ndarray) -> np.ndarray:
    """Vectorised LD over a batch of final-position logit rows."""
    idx = np.arange(len(final_logits))
    return final_logits[idx, correct].astype(np.float64) - final_logits[idx, incorrect].astype(np.float64)


@dataclass
class EvalSummary:
    ald: float
    n: int
    std: float
    per_class: dict[str, float]
    lds: np.ndarray = field(repr=False)

    @property
    def odds_ratio(self) -> float:
        return math.exp(self.ald)

    def to_json(self) -> dict:
        return {
            "ald": self.ald,
            "n": self.n,
            "std": self.std,
            "odds_ratio": self.odds_ratio,
            "per_class": self.per_class,
        }


def summarize(lds: np.ndarray, dataset: SyllogismDataset) -> EvalSummary:
    lds = np.asarray(lds, dtype=np.float64)
    pos = dataset.answer_is_positive
    per_class = {}
    for word, mask in ((dataset.pair.positive_word, pos), (dataset.pair.negative_word, ~pos)):
        per_class[word.strip()] = float(lds[mask].mean()) if mask.any() else float("nan")
    std = float(lds.std(ddof=1)) if len(lds) > 1 else 0.0
    return EvalSummary(float(lds.mean()), len(lds), std, per_class, lds)


Runner = Callable[[np.ndarray], np.ndarray]


def model_runner(weights: ModelWeights, replacements=None, batch_size: int = 32) -> Runner:
    """A runner mapping (B, T) tokens to final-position logits (B, vocab)."""

    def run(tokens: np.ndarray) -> np.ndarray:
        return run_batched(weights, tokens, replacements, batch_size=batch_size).logits_last

    return run


def average_logit_diff(runner: Runner, dataset: SyllogismDataset, batch_size: int = 64) -> EvalSummary:
    if len(dataset) == 0:
        raise ValueError("empty dataset")
    lds = []
    tokens = dataset.clean
    for sl in iter_batches(len(dataset), batch_size):
        lds.append(logit_diffs(runner(tokens[sl]), dataset.correct_ids[sl], dataset.incorrect_ids[sl]))
    return summarize(np.concatenate(lds), dataset)


def faithfulness(ald_model: float, ald_circuit: float) -> float:
    return abs(ald_model - ald_circuit)
