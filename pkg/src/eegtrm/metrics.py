"""Accuracy and the two-tailed paired t-test."""

from __future__ import annotations

import csv
import io
import math
from dataclasses import dataclass
from typing import Mapping, Sequence

import numpy as np

from .errors import NumericalError, ValidationError


def accuracy(predictions: Sequence[int], truth: Sequence[int]) -> float:
    predictions, truth = np.asarray(predictions), np.asarray(truth)
    if predictions.shape != truth.shape:
        raise ValidationError(f"length mismatch: {predictions.shape} vs {truth.shape}")
    if predictions.size == 0:
        raise ValidationError("accuracy of an empty set is undefined")
    return int(np.count_nonzero(predictions == truth)) / predictions.size


def _beta_continued_fraction(a: float, b: float, x: float, tol: float = 1e-15, max_iter: int = 10_000) -> float:
    # modified Lentz evaluation of the incomplete-beta continued fraction
    tiny = 1e-300
    qab, qap, qam = a + b, a + 1.0, a - 1.0
    c = 1.0
    d = 1.0 - qab * x / qap
    d = 1.0 / (d if abs(d) > tiny else tiny)
    h = d
    for m in range(1, max_iter + 1):
        m2 = 2 * m
        aa = m * (b - m) * x / ((qam + m2) * (a + m2))
        d = 1.0 + aa * d
        d = 1.0 / (d if abs(d) > tiny else tiny)
        c = 1.0 + aa / c
        c = c if abs(c) > tiny else tiny
        h *= d * c
        aa = -(a + m) * (qab + m) * x / ((a + m2) * (qap + m2))
        d = 1.0 + aa * d
        d = 1.0 / (d if abs(d) > tiny else tiny)
        c = 1.0 + aa / c
        c = c if abs(c) > tiny else tiny
        delta = d * c
        h *= delta
        if abs(delta - 1.0) < tol:
            return h
    raise NumericalError(f"incomplete beta did not converge for a={a}, b={b}, x={x}")


def regularized_incomplete_beta(a: float, b: float, x: float) -> float:
    """I_x(a, b) for a, b > 0 and 0 <= x <= 1."""
    if a <= 0 or b <= 0:
        raise ValidationError("incomplete beta needs a, b > 0")
    if not 0.0 <= x <= 1.0:
        raise ValidationError("incomplete beta needs 0 <= x <= 1")
    if x == 0.0 or x == 1.0:
        return x
    log_front = (
        math.lgamma(a + b) - math.lgamma(a) - math.lgamma(b) + a * math.log(x) + b * math.log1p(-x)
    )
    front = math.exp(log_front)
    if x < (a + 1.0) / (a + b + 2.0):
        return front * _beta_continued_fraction(a, b, x) / a
    return 1.0 - front * _beta_continued_fraction(b, a, 1.0 - x) / b


def student_t_two_tailed_p(t: float, df: float) -> float:
    """P(|T| >= |t|) for Student's t with ``df`` degrees of freedom."""
    if df <= 0:
        raise ValidationError("degrees of freedom must be positive")
    if t == 0.0:
        return 1.0
    if math.isinf(t):
        return 0.0
    return regularized_incomplete_beta(df / 2.0, 0.5, df / (df + t * t))


def student_t_cdf(t: float, df: float) -> float:
    half_tail = 0.5 * student_t_two_tailed_p(t, df)
    return 1.0 - half_tail if t > 0 else half_tail


@dataclass(frozen=True)
class PairedTTestResult:
    t_statistic: float
    degrees_of_freedom: int
    p_value: float

    def __str__(self) -> str:
        return f"t={self.t_statistic:.6g} df={self.degrees_of_freedom} p={self.p_value:.6g}"


def paired_ttest(a: Sequence[float], b: Sequence[float]) -> PairedTTestResult:
    a, b = np.asarray(a, dtype=np.float64), np.asarray(b, dtype=np.float64)
    if a.shape != b.shape or a.ndim != 1:
        raise ValidationError(f"paired samples must be 1-D and equal length, got {a.shape} and {b.shape}")
    n = a.size
    if n < 2:
        raise ValidationError("paired t-test needs at least 2 pairs")
    d = a - b
    sd = float(np.std(d, ddof=1))
    if sd == 0.0:
        raise ValidationError("zero variance of differences: t is undefined")
    t = float(np.mean(d)) / (sd / math.sqrt(n))
    return PairedTTestResult(t, n - 1, student_t_two_tailed_p(t, n - 1))


def accuracy_table_csv(columns: Mapping[str, Sequence[float]], subjects: Sequence[str] | None = None) -> str:
    """Per-subject accuracy table with an ``Average`` (mean ± sd) row and a
    ``p`` row holding each column's paired t-test against the first column.
    """
    names = list(columns)
    if not names:
        raise ValidationError("no columns")
    n = len(columns[names[0]])
    if any(len(columns[k]) != n for k in names):
        raise ValidationError("all columns need one value per subject")
    subjects = list(subjects) if subjects is not None else [f"S{i + 1}" for i in range(n)]
    buf = io.StringIO()
    writer = csv.writer(buf, lineterminator="\n")
    writer.writerow(["Subject", *names])
    for i, s in enumerate(subjects):
        writer.writerow([s, *(f"{columns[k][i]:.4f}" for k in names)])
    writer.writerow(
        ["Average", *(f"{np.mean(columns[k]):.4f} ± {np.std(columns[k], ddof=1) if n > 1 else 0.0:.4f}" for k in names)]
    )
    p_row = ["p", "-"]
    for k in names[1:]:
        try:
            p_row.append(f"{paired_ttest(columns[k], columns[names[0]]).p_value:.4g}")
        except ValidationError:
            p_row.append("nan")
    writer.writerow(p_row)
    return buf.getvalue()
