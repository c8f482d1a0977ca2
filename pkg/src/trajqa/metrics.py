"""Target / sub-question / consistency accuracy and paired bootstrap testing."""
from __future__ import annotations

import json
from collections import Counter
from concurrent.futures import ThreadPoolExecutor
from dataclasses import asdict, dataclass, field
from decimal import ROUND_HALF_EVEN, Decimal
from fractions import Fraction
from pathlib import Path
from typing import Dict, Iterable, List, Mapping, Optional, Sequence, Tuple

import numpy as np

from .bench import ERROR_TAGS, BenchItem, QuestionType
from .errors import MissingPredictionError, SchemaError


@dataclass(frozen=True)
class PredictionRecord:
    item_id: str
    target_pred: str
    sub_preds: Tuple[str, ...] = ()

    def __post_init__(self) -> None:
        object.__setattr__(self, "sub_preds", tuple(self.sub_preds))

    def to_dict(self) -> dict:
        return {"item_id": self.item_id, "target_pred": self.target_pred, "sub_preds": list(self.sub_preds)}

    @classmethod
    def from_dict(cls, d: Mapping) -> "PredictionRecord":
        return cls(str(d["item_id"]), d["target_pred"], tuple(d.get("sub_preds", ())))


def load_predictions(path: str | Path) -> List[PredictionRecord]:
    out = []
    with open(path) as fh:
        for lineno, line in enumerate(fh, 1):
            if not line.strip():
                continue
            try:
                out.append(PredictionRecord.from_dict(json.loads(line)))
            except (ValueError, KeyError, TypeError) as exc:
                raise SchemaError(str(exc) or type(exc).__name__, line=lineno, path=str(path)) from exc
    return out


def save_predictions(preds: Iterable[PredictionRecord], path: str | Path, append: bool = False) -> None:
    with open(path, "a" if append else "w") as fh:
        for p in preds:
            fh.write(json.dumps(p.to_dict(), sort_keys=True) + "\n")


def _paired(items: Sequence[BenchItem], preds: Iterable[PredictionRecord]) -> List[Tuple[BenchItem, PredictionRecord]]:
    by_id = {p.item_id: p for p in preds}
    missing = [i.item_id for i in items if i.item_id not in by_id]
    if missing:
        raise MissingPredictionError(missing)
    pairs = []
    for item in items:
        p = by_id[item.item_id]
        if len(p.sub_preds) != len(item.sub_questions):
            raise SchemaError(
                f"item {item.item_id!r}: {len(p.sub_preds)} sub predictions for "
                f"{len(item.sub_questions)} sub-questions"
            )
        pairs.append((item, p))
    return pairs


def _target_ok(item: BenchItem, p: PredictionRecord) -> bool:
    return p.target_pred == item.target_answer


def _sub_hits(item: BenchItem, p: PredictionRecord) -> List[bool]:
    return [pred == sq.answer for pred, sq in zip(p.sub_preds, item.sub_questions)]


def target_fraction(pairs) -> Fraction:
    if not pairs:
        return Fraction(0)
    return Fraction(sum(_target_ok(i, p) for i, p in pairs), len(pairs))


def sub_fraction(pairs) -> Fraction:
    total = sum(len(i.sub_questions) for i, _ in pairs)
    if total == 0:
        return Fraction(0)
    return Fraction(sum(sum(_sub_hits(i, p)) for i, p in pairs), total)


def cons_fraction(pairs) -> Optional[Fraction]:
    correct = [(i, p) for i, p in pairs if _target_ok(i, p)]
    if not correct:
        return None
    per_item = [
        Fraction(sum(_sub_hits(i, p)), len(i.sub_questions)) if i.sub_questions else Fraction(1)
        for i, p in correct
    ]
    return sum(per_item, Fraction(0)) / len(per_item)


def a_target(items: Sequence[BenchItem], preds: Iterable[PredictionRecord]) -> float:
    return float(target_fraction(_paired(items, preds)))


def a_sub(items: Sequence[BenchItem], preds: Iterable[PredictionRecord]) -> float:
    """Pooled accuracy over every sub-question of every item."""
    return float(sub_fraction(_paired(items, preds)))


def a_cons(items: Sequence[BenchItem], preds: Iterable[PredictionRecord]) -> Optional[float]:
    """Mean per-item sub-question accuracy over correctly answered targets.

    ``None`` when no target is answered correctly.
    """
    frac = cons_fraction(_paired(items, preds))
    return None if frac is None else float(frac)


@dataclass
class MetricReport:
    a_target: float
    a_sub: float
    a_cons: Optional[float]
    n_targets: int
    n_subs: int
    n_correct_targets: int
    breakdowns: Dict[str, Optional[float]] = field(default_factory=dict)
    error_modes: Dict[str, float] = field(default_factory=dict)
    fingerprint: str = ""

    def to_dict(self) -> dict:
        return asdict(self)


def error_mode_fractions(pairs) -> Dict[str, float]:
    counts: Counter = Counter()
    for item, p in pairs:
        if _target_ok(item, p):
            continue
        for hit, sq in zip(_sub_hits(item, p), item.sub_questions):
            if not hit and sq.error_tag is not None:
                counts[sq.error_tag] += 1
    total = sum(counts.values())
    return {tag: (counts[tag] / total if total else 0.0) for tag in ERROR_TAGS}


def compute_report(items: Sequence[BenchItem], preds: Iterable[PredictionRecord], fingerprint: str = "") -> MetricReport:
    pairs = _paired(items, preds)
    cons = cons_fraction(pairs)
    breakdowns = {}
    for qt in QuestionType:
        subset = [(i, p) for i, p in pairs if i.question_type is qt]
        if subset:
            c = cons_fraction(subset)
            breakdowns[qt.value] = None if c is None else float(c)
    return MetricReport(
        a_target=float(target_fraction(pairs)),
        a_sub=float(sub_fraction(pairs)),
        a_cons=None if cons is None else float(cons),
        n_targets=len(pairs),
        n_subs=sum(len(i.sub_questions) for i, _ in pairs),
        n_correct_targets=sum(_target_ok(i, p) for i, p in pairs),
        breakdowns=breakdowns,
        error_modes=error_mode_fractions(pairs),
        fingerprint=fingerprint,
    )


def pct(value: Optional[float]) -> str:
    """Percentage with one decimal, rounding half to even; ``n/a`` for undefined."""
    if value is None:
        return "n/a"
    f = Fraction(value).limit_denominator(10**9) * 100
    d = (Decimal(f.numerator) / Decimal(f.denominator)).quantize(Decimal("0.1"), rounding=ROUND_HALF_EVEN)
    return str(d)


def format_table(rows: Sequence[Tuple[str, MetricReport]]) -> str:
    header = ["system", "A_target", "A_sub", "A_cons"]
    body = [[name, pct(r.a_target), pct(r.a_sub), pct(r.a_cons)] for name, r in rows]
    widths = [max(len(str(row[k])) for row in [header] + body) for k in range(len(header))]
    lines = []
    for n, row in enumerate([header] + body):
        lines.append("| " + " | ".join(str(c).ljust(w) for c, w in zip(row, widths)) + " |")
        if n == 0:
            lines.append("|" + "|".join("-" * (w + 2) for w in widths) + "|")
    return "\n".join(lines)


# -- paired bootstrap -------------------------------------------------------

BOOTSTRAP_BATCH = 1000


@dataclass
class BootstrapResult:
    resamples: int
    seed: int
    p_value: float
    ci_low: float
    ci_high: float
    observed_delta: float

    def to_dict(self) -> dict:
        return asdict(self)


def bootstrap_deltas(diff: np.ndarray, resamples: int, seed: int, workers: int = 1) -> np.ndarray:
    """Resampled per-item accuracy differences, as integer sums over ``len(diff)`` items.

    Resamples are drawn in fixed-size batches, each from its own child of
    ``SeedSequence(seed)``, so the output does not depend on ``workers``.
    """
    n = len(diff)
    n_batches = -(-resamples // BOOTSTRAP_BATCH)
    children = np.random.SeedSequence(seed).spawn(n_batches)

    def batch(b: int) -> np.ndarray:
        size = min(BOOTSTRAP_BATCH, resamples - b * BOOTSTRAP_BATCH)
        idx = np.random.default_rng(children[b]).integers(0, n, size=(size, n))
        return diff[idx].sum(axis=1)

    if workers > 1:
        with ThreadPoolExecutor(max_workers=workers) as pool:
            parts = list(pool.map(batch, range(n_batches)))
    else:
        parts = [batch(b) for b in range(n_batches)]
    return np.concatenate(parts)


def paired_bootstrap(
    items: Sequence[BenchItem],
    preds_a: Iterable[PredictionRecord],
    preds_b: Iterable[PredictionRecord],
    resamples: int = 10_000,
    seed: int = 0,
    workers: int = 1,
) -> BootstrapResult:
    """Two-sided paired bootstrap on the target-accuracy difference A - B.

    The p-value doubles the fraction of resamples whose difference is zero or
    of the opposite sign to the observed one; the interval is the 2.5/97.5
    percentile range of resampled differences.
    """
    if resamples < 1:
        raise ValueError("resamples must be >= 1")
    pa, pb = _paired(items, preds_a), _paired(items, preds_b)
    if not pa:
        raise ValueError("need at least one item")
    ca = np.array([_target_ok(i, p) for i, p in pa], dtype=np.int64)
    cb = np.array([_target_ok(i, p) for i, p in pb], dtype=np.int64)
    diff = ca - cb
    n = len(diff)
    observed = int(diff.sum())
    sums = bootstrap_deltas(diff, resamples, seed, workers)
    extreme = np.count_nonzero(sums <= 0) if observed >= 0 else np.count_nonzero(sums >= 0)
    p = min(1.0, 2.0 * extreme / resamples)
    lo, hi = np.percentile(sums / n, [2.5, 97.5])
    return BootstrapResult(resamples, seed, float(p), float(lo), float(hi), observed / n)
