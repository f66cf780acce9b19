"""Edit-distance OCR score and per-level clearing evaluation.

Character recognition itself is delegated to an external command (or any
Python callable), so this module only handles plumbing and arithmetic.
"""

from __future__ import annotations

import csv
import os
import re
import shlex
import subprocess
import tempfile
from concurrent.futures import ThreadPoolExecutor
from dataclasses import dataclass, field
from pathlib import Path
from typing import Callable, Optional, Sequence, Union

import numpy as np

from .image import save_image

CLEAR_THRESHOLD = 70.0
OCR_ENV_VAR = "HDCBLUR_OCR_CMD"

Recognizer = Union[str, Callable[[np.ndarray], str]]


class NoRecognizerError(RuntimeError):
    """No OCR command was configured."""


class RecognizerError(RuntimeError):
    pass


def levenshtein(a: str, b: str) -> int:
    """Unit-cost edit distance over code points (two-row dynamic program)."""
    if len(a) < len(b):
        a, b = b, a
    if not b:
        return len(a)
    prev = list(range(len(b) + 1))
    for i, ca in enumerate(a, 1):
        cur = [i]
        for j, cb in enumerate(b, 1):
            cur.append(min(prev[j] + 1, cur[j - 1] + 1, prev[j - 1] + (ca != cb)))
        prev = cur
    return prev[-1]


def collapse_whitespace(text: str) -> str:
    return re.sub(r"\s+", " ", text).strip()


def ocr_score(ground_truth: str, predicted: str, collapse: bool = False) -> float:
    """``100 * max(0, 1 - d / max(1, len(gt)))``."""
    if collapse:
        ground_truth, predicted = collapse_whitespace(ground_truth), collapse_whitespace(predicted)
    d = levenshtein(ground_truth, predicted)
    return 100.0 * max(0.0, 1.0 - d / max(1, len(ground_truth)))


def recognize(image: np.ndarray, recognizer: Optional[Recognizer]) -> str:
    """Read the text in ``image`` with an external command or a callable.

    A command template gets the path of a temporary 16-bit PGM substituted
    for ``{in}``; its UTF-8 standard output, minus trailing whitespace, is
    the recognized text.
    """
    if recognizer is None or (isinstance(recognizer, str) and not recognizer.strip()):
        raise NoRecognizerError("no recognizer configured")
    if callable(recognizer):
        return str(recognizer(image)).rstrip()
    with tempfile.TemporaryDirectory(prefix="hdcblur-ocr-") as tmp:
        src = Path(tmp) / "input.pgm"
        save_image(image, src, bits=16)
        argv = [tok.replace("{in}", str(src)) for tok in shlex.split(recognizer)]
        try:
            proc = subprocess.run(argv, capture_output=True)
        except OSError as exc:
            raise RecognizerError(f"cannot run recognizer: {exc}") from exc
    if proc.returncode != 0:
        raise RecognizerError(f"recognizer exited with {proc.returncode}: "
                              f"{proc.stderr.decode('utf-8', 'replace').strip()}")
    return proc.stdout.decode("utf-8").rstrip()


@dataclass
class SampleScore:
    ground_truth: str
    predicted: str
    distance: int
    score: float
    failed: bool = False
    error: str = ""


@dataclass
class ScoreReport:
    per_sample: list[SampleScore] = field(default_factory=list)

    @property
    def mean_score(self) -> float:
        if not self.per_sample:
            return 0.0
        return float(np.mean([s.score for s in self.per_sample]))

    @property
    def cleared(self) -> bool:
        return bool(self.per_sample) and self.mean_score >= CLEAR_THRESHOLD

    def summary(self) -> str:
        return f"mean={self.mean_score:.4f} cleared={int(self.cleared)}"

    def write_csv(self, path: str | os.PathLike) -> None:
        with open(path, "w", newline="", encoding="utf-8") as fh:
            writer = csv.writer(fh)
            writer.writerow(["index", "gt", "pred", "distance", "score"])
            for i, s in enumerate(self.per_sample):
                writer.writerow([i, s.ground_truth, s.predicted, s.distance, repr(s.score)])


def score_predictions(truths: Sequence[str], predictions: Sequence[str],
                      collapse: bool = False) -> ScoreReport:
    report = ScoreReport()
    for gt, pred in zip(truths, predictions, strict=True):
        a, b = (collapse_whitespace(gt), collapse_whitespace(pred)) if collapse else (gt, pred)
        report.per_sample.append(SampleScore(gt, pred, levenshtein(a, b), ocr_score(gt, pred, collapse)))
    return report


def evaluate_level(samples: Sequence[tuple[np.ndarray, str]], registry, level: int,
                   recognizer: Optional[Recognizer], threads: int = 1,
                   collapse: bool = False) -> ScoreReport:
    """Deblur, recognize and score every ``(blurry, ground_truth)`` sample.

    A sample whose deblurring or recognition fails scores 0 and is flagged;
    a missing recognizer or unknown level aborts the whole evaluation.
    """
    from .reconstruction import deblur

    if recognizer is None or (isinstance(recognizer, str) and not recognizer.strip()):
        raise NoRecognizerError("no recognizer configured")
    registry[level]  # unknown level fails up front

    def run(sample) -> SampleScore:
        blurry, gt = sample
        try:
            pred = recognize(deblur(registry, blurry, level), recognizer)
        except (RecognizerError, RuntimeError, ValueError, OSError) as exc:
            return SampleScore(gt, "", len(gt), 0.0, failed=True, error=str(exc))
        a, b = (collapse_whitespace(gt), collapse_whitespace(pred)) if collapse else (gt, pred)
        return SampleScore(gt, pred, levenshtein(a, b), ocr_score(gt, pred, collapse))

    if threads > 1:
        with ThreadPoolExecutor(max_workers=threads) as pool:
            results = list(pool.map(run, samples))
    else:
        results = [run(s) for s in samples]
    return ScoreReport(results)
