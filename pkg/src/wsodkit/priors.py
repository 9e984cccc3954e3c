"""Caption-conditioned depth priors and the masks they induce.

High-confidence predictions from a trained baseline vote depth observations
into streaming moment accumulators, keyed per class and per (class, caption
word). Freezing an accumulator yields a plausible depth range
``[mean - std, mean + std]``; at use time an image's range for a class
averages the ranges of the caption's known words, falling back to the
class-level range, and finally to no filtering at all. A mask marks which
proposals fall inside the image's range for each class.
"""

from __future__ import annotations

import json
import math
from dataclasses import dataclass, field
from pathlib import Path
from typing import Iterable, Mapping, Sequence

import numpy as np

from wsodkit.data import ClassVocabulary, ImageRecord, proposal_depth, tokenize
from wsodkit.errors import DataError, ParseError, ValidationError
from wsodkit.evaluate import Detection

DEFAULT_SCORE_THRESHOLD = 0.5
DEFAULT_MIN_COUNT_WORD = 2
MIN_COUNT_CLASS = 1
BOX_MATCH_ATOL = 1e-6


@dataclass
class RunningMoments:
    """Streaming count/sum/sum-of-squares accumulator."""

    count: int = 0
    total: float = 0.0
    total_sq: float = 0.0

    def add(self, x: float) -> None:
        if not math.isfinite(x):
            raise ValidationError(f"cannot accumulate non-finite value {x}")
        self.count += 1
        self.total += x
        self.total_sq += x * x

    def merge(self, other: "RunningMoments") -> None:
        self.count += other.count
        self.total += other.total
        self.total_sq += other.total_sq

    def mean(self) -> float:
        if self.count == 0:
            raise ValidationError("mean of an empty accumulator")
        return self.total / self.count

    def std(self) -> float:
        """Population standard deviation; tiny negative variance clamps to 0."""
        m = self.mean()
        var = self.total_sq / self.count - m * m
        return math.sqrt(max(var, 0.0))


@dataclass(frozen=True)
class DepthRange:
    """Closed plausible-depth interval; not clipped to [0, 1]."""

    lo: float
    hi: float

    def __post_init__(self) -> None:
        if not (math.isfinite(self.lo) and math.isfinite(self.hi)):
            raise ValidationError("depth range bounds must be finite")
        if self.lo > self.hi:
            raise ValidationError(f"depth range has lo > hi: ({self.lo}, {self.hi})")

    def contains(self, x: float) -> bool:
        return self.lo <= x <= self.hi


def freeze_range(moments: RunningMoments, min_count: int) -> DepthRange | None:
    """mean +/- population std, or None below the observation threshold."""
    if moments.count < min_count:
        return None
    m = moments.mean()
    s = moments.std()
    return DepthRange(m - s, m + s)


@dataclass
class DepthMask:
    """Per-proposal, per-class membership in the image's depth ranges.

    ``values[i, c]`` is 1 when proposal i's depth falls inside the range
    derived for class c, and for every class with no derivable range the
    whole column is 1 (no filtering).
    """

    values: np.ndarray
    defined_classes: set[int]

    def column(self, class_id: int) -> np.ndarray:
        return self.values[:, class_id]

    def all_ones(self) -> bool:
        return bool((self.values == 1).all())


class PriorStats:
    """Streaming depth statistics keyed by class and by (class, word)."""

    def __init__(self, min_count_word: int = DEFAULT_MIN_COUNT_WORD) -> None:
        if min_count_word < 1:
            raise ValidationError("min_count_word must be >= 1")
        self.min_count_word = int(min_count_word)
        self.by_class: dict[int, RunningMoments] = {}
        self.by_class_word: dict[tuple[int, str], RunningMoments] = {}
        self.skipped_boxes = 0

    def add_observation(
        self, class_id: int, depth: float, caption: str | None
    ) -> None:
        """Record one accepted box depth under its class and caption words.

        Each distinct caption token contributes once per box regardless of
        how often it repeats in the caption.
        """
        self.by_class.setdefault(int(class_id), RunningMoments()).add(depth)
        if caption:
            for tok in set(tokenize(caption)):
                key = (int(class_id), tok)
                self.by_class_word.setdefault(key, RunningMoments()).add(depth)

    def merge(self, other: "PriorStats") -> None:
        for cid, m in other.by_class.items():
            self.by_class.setdefault(cid, RunningMoments()).merge(m)
        for key, m in other.by_class_word.items():
            self.by_class_word.setdefault(key, RunningMoments()).merge(m)
        self.skipped_boxes += other.skipped_boxes

    def freeze(self) -> "FrozenPriors":
        return FrozenPriors.from_stats(self)

    def save(self, path: str | Path) -> None:
        """Serialize moments (not ranges) so thresholds can change at load."""

        def entry(m: RunningMoments) -> dict:
            return {"count": m.count, "mean": m.mean(), "std": m.std()}

        obj = {
            "min_count": self.min_count_word,
            "by_class": {
                str(cid): entry(self.by_class[cid]) for cid in sorted(self.by_class)
            },
            "by_class_word": {
                f"{cid}|{word}": entry(self.by_class_word[(cid, word)])
                for cid, word in sorted(self.by_class_word)
            },
        }
        Path(path).write_text(
            json.dumps(obj, indent=2, sort_keys=True) + "\n", encoding="utf-8"
        )


class FrozenPriors:
    """Immutable depth ranges derived from accumulated statistics."""

    def __init__(
        self,
        by_class: Mapping[int, DepthRange],
        by_class_word: Mapping[tuple[int, str], DepthRange],
    ) -> None:
        self.by_class = dict(by_class)
        self.by_class_word = dict(by_class_word)

    @classmethod
    def from_stats(cls, stats: PriorStats) -> "FrozenPriors":
        by_class = {}
        for cid, m in stats.by_class.items():
            r = freeze_range(m, MIN_COUNT_CLASS)
            if r is not None:
                by_class[cid] = r
        by_class_word = {}
        for key, m in stats.by_class_word.items():
            r = freeze_range(m, stats.min_count_word)
            if r is not None:
                by_class_word[key] = r
        return cls(by_class, by_class_word)

    @classmethod
    def load(cls, path: str | Path) -> "FrozenPriors":
        try:
            obj = json.loads(Path(path).read_text(encoding="utf-8"))
        except OSError as e:
            raise DataError(f"cannot read priors file {path}: {e}") from e
        except json.JSONDecodeError as e:
            raise ParseError(f"malformed priors file {path}: {e}") from e
        try:
            min_count = int(obj["min_count"])
            by_class = {}
            for cid, entry in obj["by_class"].items():
                m = _moments_from_entry(entry)
                r = freeze_range(m, MIN_COUNT_CLASS)
                if r is not None:
                    by_class[int(cid)] = r
            by_class_word = {}
            for key, entry in obj["by_class_word"].items():
                cid, _, word = key.partition("|")
                m = _moments_from_entry(entry)
                r = freeze_range(m, min_count)
                if r is not None:
                    by_class_word[(int(cid), word)] = r
        except (TypeError, KeyError, ValueError) as e:
            raise ValidationError(f"bad priors file {path}: {e}") from e
        return cls(by_class, by_class_word)

    def image_range(self, class_id: int, caption: str | None) -> DepthRange | None:
        """Depth range for one class in one image.

        Averages, bound by bound, the ranges of the caption's distinct
        words that have a frozen range for this class; falls back to the
        class-level range, then to None (no filtering).
        """
        if caption:
            words = sorted(set(tokenize(caption)))
            ranges = [
                self.by_class_word[(class_id, w)]
                for w in words
                if (class_id, w) in self.by_class_word
            ]
            if ranges:
                lo = sum(r.lo for r in ranges) / len(ranges)
                hi = sum(r.hi for r in ranges) / len(ranges)
                return DepthRange(lo, hi)
        return self.by_class.get(class_id)


def depth_mask(
    record: ImageRecord,
    priors: FrozenPriors,
    num_classes: int,
    use_caption: bool = True,
) -> DepthMask:
    """Mask of proposals inside each class's depth range for this image.

    Classes without a derivable range get an all-ones column. Interval
    membership is closed on both ends.
    """
    r = record.num_proposals
    values = np.ones((r, num_classes), dtype=np.uint8)
    defined: set[int] = set()
    caption = record.caption if use_caption else None
    for c in range(num_classes):
        rng = priors.image_range(c, caption)
        if rng is None:
            continue
        defined.add(c)
        inside = (record.proposal_depths >= rng.lo) & (
            record.proposal_depths <= rng.hi
        )
        values[:, c] = inside.astype(np.uint8)
    return DepthMask(values=values, defined_classes=defined)


def _moments_from_entry(entry: dict) -> RunningMoments:
    count = int(entry["count"])
    mean = float(entry["mean"])
    std = float(entry["std"])
    return RunningMoments(
        count=count, total=mean * count, total_sq=(std * std + mean * mean) * count
    )


def _resolve_depth(pred: Detection, record: ImageRecord) -> float | None:
    """Depth for a predicted box: matching proposal first, depth map second."""
    box = pred.box.as_array()
    if box[2] > record.width or box[3] > record.height:
        return None
    diffs = np.abs(record.proposals - box[None, :]).max(axis=1)
    hit = int(np.argmin(diffs))
    if diffs[hit] <= BOX_MATCH_ATOL:
        return float(record.proposal_depths[hit])
    if record.depth_map is not None:
        return proposal_depth(record.depth_map, pred.box)
    return None


def accumulate(
    stats: PriorStats,
    pred: Detection,
    record: ImageRecord,
    score_threshold: float = DEFAULT_SCORE_THRESHOLD,
) -> float | None:
    """Fold one prediction into the statistics.

    Only predictions scoring strictly above the threshold count. Boxes
    whose depth cannot be resolved (outside the image, or matching no
    proposal when there is no depth map to pool from) are skipped and
    tallied in ``stats.skipped_boxes``. Returns the accepted depth, or
    None when the prediction did not contribute.
    """
    if pred.score <= score_threshold:
        return None
    depth = _resolve_depth(pred, record)
    if depth is None:
        stats.skipped_boxes += 1
        return None
    stats.add_observation(pred.class_id, depth, record.caption)
    return depth


@dataclass
class CoverageRow:
    class_id: int
    count: int
    mean: float
    std: float
    inside_fraction: float


@dataclass
class CoverageReport:
    """Per-class summary of accepted boxes and how many fall in their range."""

    rows: list[CoverageRow] = field(default_factory=list)
    accepted: int = 0
    skipped: int = 0

    def to_json(self) -> dict:
        return {
            "accepted": self.accepted,
            "skipped": self.skipped,
            "classes": [
                {
                    "class_id": r.class_id,
                    "count": r.count,
                    "mean": r.mean,
                    "std": r.std,
                    "inside_fraction": r.inside_fraction,
                }
                for r in self.rows
            ],
        }

    def to_text(self, vocab: ClassVocabulary | None = None) -> str:
        lines = [
            f"{'class':>12}  {'count':>6}  {'mean':>7}  {'std':>7}  {'inside':>7}"
        ]
        for r in self.rows:
            name = (
                vocab.name_of(r.class_id) if vocab is not None else str(r.class_id)
            )
            lines.append(
                f"{name:>12}  {r.count:>6d}  {r.mean:>7.4f}  {r.std:>7.4f}  "
                f"{r.inside_fraction:>7.4f}"
            )
        lines.append(f"accepted boxes: {self.accepted}, skipped: {self.skipped}")
        return "\n".join(lines)


def estimate_priors(
    records: Iterable[ImageRecord],
    predictions: Sequence[Detection],
    score_threshold: float = DEFAULT_SCORE_THRESHOLD,
    min_count_word: int = DEFAULT_MIN_COUNT_WORD,
) -> tuple[PriorStats, FrozenPriors, CoverageReport]:
    """One pass over predictions: accumulate, freeze, and report coverage.

    Predictions referencing unknown image ids raise DataError. The coverage
    fractions replay the accepted observations against the frozen
    class-level ranges.
    """
    by_id = {rec.image_id: rec for rec in records}
    stats = PriorStats(min_count_word=min_count_word)
    accepted: list[tuple[int, float]] = []
    for pred in predictions:
        rec = by_id.get(pred.image_id)
        if rec is None:
            raise DataError(f"prediction references unknown image {pred.image_id!r}")
        depth = accumulate(stats, pred, rec, score_threshold)
        if depth is not None:
            accepted.append((pred.class_id, depth))
    frozen = stats.freeze()
    report = CoverageReport(accepted=len(accepted), skipped=stats.skipped_boxes)
    for cid in sorted(stats.by_class):
        m = stats.by_class[cid]
        rng = frozen.by_class.get(cid)
        values = [d for c, d in accepted if c == cid]
        inside = (
            sum(1 for d in values if rng is not None and rng.contains(d))
            / len(values)
            if values
            else 0.0
        )
        report.rows.append(
            CoverageRow(
                class_id=cid,
                count=m.count,
                mean=m.mean(),
                std=m.std(),
                inside_fraction=inside,
            )
        )
    return stats, frozen, report
