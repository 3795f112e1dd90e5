"""Embedding and composite training objectives.

The language-embedding loss is the plain sum of the language and speaker
cross-entropies; adversarial behaviour lives entirely in the gradient
reversal applied before the speaker head. The downstream task loss (per-frame
phoneme cross-entropy) stands in for the synthesis losses of a full TTS model.
"""

from __future__ import annotations

import csv
import math
from dataclasses import dataclass, fields
from pathlib import Path

from . import tensor as T
from .tensor import Tensor

MULTILINGUAL = "multilingual"
LOW_RESOURCE = "low_resource"
STAGES = {1: MULTILINGUAL, 2: LOW_RESOURCE, MULTILINGUAL: MULTILINGUAL, LOW_RESOURCE: LOW_RESOURCE}


def language_loss(lang_logits: Tensor, y_lang) -> Tensor:
    return T.softmax_cross_entropy(lang_logits, y_lang)


def speaker_loss(spk_logits: Tensor, y_spk) -> Tensor:
    return T.softmax_cross_entropy(spk_logits, y_spk)


def task_loss(phoneme_logits: Tensor, phonemes) -> Tensor:
    return T.softmax_cross_entropy(phoneme_logits, phonemes.reshape(-1))


def le_loss(l_lang, l_spk):
    if isinstance(l_lang, Tensor):
        return T.add(l_lang, l_spk)
    return l_lang + l_spk


def composite_loss(stage, l_le, l_task):
    """Stage 1 optimizes task + embedding loss; stage 2 the task loss alone."""
    try:
        name = STAGES[stage]
    except (KeyError, TypeError):
        raise ValueError(f"unknown stage {stage!r}; expected one of {sorted(map(str, STAGES))}") from None
    if name == LOW_RESOURCE:
        return l_task
    if isinstance(l_task, Tensor):
        return T.add(l_task, l_le)
    return l_task + l_le


@dataclass
class LossReport:
    step: int
    l_lang: float
    l_spk: float
    l_le: float
    l_task: float
    l_total: float

    def __post_init__(self):
        for f in fields(self):
            v = getattr(self, f.name)
            if not math.isfinite(v):
                raise T.NumericalError(f"non-finite {f.name} at step {self.step}")

    def row(self) -> list[str]:
        return [str(self.step)] + [repr(float(getattr(self, k))) for k in COLUMNS[1:]]


COLUMNS = ("step", "l_lang", "l_spk", "l_le", "l_task", "l_total")


class MetricsWriter:
    """Streams ``LossReport`` rows to a CSV file."""

    def __init__(self, path):
        self.path = Path(path)
        self.path.parent.mkdir(parents=True, exist_ok=True)
        self._fh = open(self.path, "w", newline="", encoding="utf-8")
        self._w = csv.writer(self._fh, lineterminator="\n")
        self._w.writerow(COLUMNS)

    def write(self, report: LossReport) -> None:
        self._w.writerow(report.row())

    def close(self) -> None:
        self._fh.close()

    def __enter__(self):
        return self

    def __exit__(self, *exc):
        self.close()
        return False


def read_metrics(path) -> list[dict[str, float]]:
    with open(path, newline="", encoding="utf-8") as fh:
        return [{k: float(v) for k, v in row.items()} for row in csv.DictReader(fh)]
