"""Ranking metrics (MRR@k, NDCG@k), passage-extraction MRR and robustness reports."""

from __future__ import annotations

import csv
import json
import math
import re
from dataclasses import dataclass, field
from pathlib import Path
from typing import Hashable, Iterable, Mapping, Optional, Sequence


@dataclass(frozen=True)
class EvalRecord:
    query_id: str
    ranking: tuple
    gold: Optional[Hashable] = None


def _check_unique(ranking):
    if len(set(ranking)) != len(ranking):
        raise ValueError("ranking contains duplicate ids")


def reciprocal_rank(ranking: Sequence, gold, k: int = 10) -> float:
    _check_unique(ranking)
    for rank, item in enumerate(ranking[:k], 1):
        if item == gold:
            return 1.0 / rank
    return 0.0


def mrr_at_k(records: Iterable[EvalRecord], k: int = 10) -> float:
    records = list(records)
    if not records:
        raise ValueError("no records")
    return sum(reciprocal_rank(r.ranking, r.gold, k) for r in records) / len(records)


def dcg(gains: Sequence[float]) -> float:
    return sum(g / math.log2(i + 2) for i, g in enumerate(gains))


def ndcg_query(ranking: Sequence, gains: Mapping, k: int = 10) -> float:
    """NDCG@k for one ranking; ``gains`` maps id to graded relevance (missing = 0)."""
    _check_unique(ranking)
    if any(g < 0 for g in gains.values()):
        raise ValueError("gains must be non-negative")
    ideal = dcg(sorted(gains.values(), reverse=True)[:k])
    if ideal == 0.0:
        return 0.0
    return dcg([gains.get(i, 0.0) for i in ranking[:k]]) / ideal


def ndcg_at_k(records: Iterable[tuple[Sequence, Mapping]], k: int = 10) -> float:
    records = list(records)
    if not records:
        raise ValueError("no records")
    return sum(ndcg_query(r, g, k) for r, g in records) / len(records)


def rank_passages(values: Sequence[Optional[float]]) -> list[int]:
    """Passage indices by descending value, ties to the lower index; ``None`` entries dropped."""
    idx = [i for i, v in enumerate(values) if v is not None]
    return sorted(idx, key=lambda i: (-values[i], i))


@dataclass
class PassageEval:
    mrr: float
    evaluated: int
    skipped: list = field(default_factory=list)


def passage_extraction_eval(attributions: Iterable, positives: Mapping, k: int = 10) -> PassageEval:
    """MRR@k of the positive passage when each document's passages are ranked by attribution.

    ``attributions`` yields objects or dicts with ``query_id``, ``doc_id`` and
    ``values``; ``positives`` maps ``(query_id, doc_id)`` to the positive
    index, or ``None`` when the gold passage is not covered (skipped).
    """
    rrs = []
    skipped = []
    for a in attributions:
        rec = a if isinstance(a, Mapping) else {f: getattr(a, f) for f in ("query_id", "doc_id", "values")}
        key = (rec["query_id"], rec["doc_id"])
        if key not in positives:
            raise KeyError(f"no positive passage recorded for {key}")
        pos = positives[key]
        if pos is None:
            skipped.append(key)
            continue
        rrs.append(reciprocal_rank(rank_passages(rec["values"]), pos, k))
    if not rrs:
        raise ValueError("no evaluable records")
    return PassageEval(sum(rrs) / len(rrs), len(rrs), skipped)


@dataclass(frozen=True)
class RobustnessReport:
    metric_before: float
    metric_after: float
    pct_change: float

    @property
    def rendered(self) -> str:
        return render_pct(self.pct_change)


def render_pct(fraction: float) -> str:
    """Signed percentage with one decimal, e.g. ``-4.7%``; zero renders as ``0.0%``."""
    text = f"{fraction * 100:.1f}"
    if text in ("-0.0", "0.0"):
        return "0.0%"
    return ("+" if fraction > 0 else "") + text + "%"


def parse_pct(text: str) -> float:
    m = re.fullmatch(r"\s*([+-]?\d+(?:\.\d+)?)\s*%\s*", text)
    if not m:
        raise ValueError(f"not a percentage: {text!r}")
    return float(m.group(1)) / 100.0


def robustness_report(before: float, after: float) -> RobustnessReport:
    if not before > 0:
        raise ValueError("metric before attack must be positive")
    return RobustnessReport(before, after, (after - before) / before)


def write_report(out_dir, rows: Sequence[dict], name: str = "report") -> tuple[Path, Path]:
    """Write ``rows`` as TSV and a JSON mirror; columns follow the first row's keys."""
    out = Path(out_dir)
    out.mkdir(parents=True, exist_ok=True)
    columns = []
    for row in rows:
        for key in row:
            if key not in columns:
                columns.append(key)
    tsv, js = out / f"{name}.tsv", out / f"{name}.json"
    with open(tsv, "w", encoding="utf-8", newline="") as fh:
        writer = csv.DictWriter(fh, columns, delimiter="\t", lineterminator="\n", restval="")
        writer.writeheader()
        writer.writerows(rows)
    js.write_text(json.dumps(list(rows), indent=2) + "\n", encoding="utf-8")
    return tsv, js
