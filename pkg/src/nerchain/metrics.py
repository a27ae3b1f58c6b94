"""Entity-level precision/recall/F1 and error analysis.

Scoring is exact-span matching: a predicted span counts as a true positive
only when a gold span with the same (start, end, type) exists in the same
sentence. Per-class scores aggregate over the corpus; the macro row is the
unweighted mean of the per-class values.
"""

from dataclasses import dataclass, field

from .conll_io import Corpus
from .tagscheme import (
    EntitySpan,
    count_invalid_transitions,
    extract_spans,
    repair_bio,
)


class ScoringError(ValueError):
    pass


def f1(p: float, r: float) -> float:
    """Harmonic mean of precision and recall; 0 when both are 0."""
    if not (0.0 <= p <= 1.0 and 0.0 <= r <= 1.0):
        raise ScoringError(f"precision/recall must lie in [0, 1], got ({p}, {r})")
    return 0.0 if p + r == 0.0 else 2.0 * p * r / (p + r)


@dataclass(frozen=True)
class ClassScore:
    entity_type: str
    tp: int
    fp: int
    fn: int

    @property
    def precision(self) -> float:
        return self.tp / (self.tp + self.fp) if self.tp + self.fp else 0.0

    @property
    def recall(self) -> float:
        return self.tp / (self.tp + self.fn) if self.tp + self.fn else 0.0

    @property
    def f1(self) -> float:
        return f1(self.precision, self.recall)


@dataclass
class MetricsReport:
    per_class: list[ClassScore]
    confusion: dict[tuple[str, str], int]
    invalid_transition_count: int

    @property
    def macro_precision(self) -> float:
        return sum(c.precision for c in self.per_class) / len(self.per_class)

    @property
    def macro_recall(self) -> float:
        return sum(c.recall for c in self.per_class) / len(self.per_class)

    @property
    def macro_f1(self) -> float:
        return sum(c.f1 for c in self.per_class) / len(self.per_class)


@dataclass
class ErrorBreakdown:
    """Span-level error listings. Confusions pair overlapping gold/predicted
    spans of different types; boundary errors overlap with the right type but
    the wrong extent; misses/spurious have no overlapping counterpart."""

    confusion: dict[tuple[str, str], int] = field(default_factory=dict)
    boundary: list[tuple[str, EntitySpan, EntitySpan]] = field(default_factory=list)
    misses: list[tuple[str, EntitySpan]] = field(default_factory=list)
    spurious: list[tuple[str, EntitySpan]] = field(default_factory=list)


def _prepare(gold: Corpus, predicted, repair: str):
    """Validate alignment, count raw invalid transitions, repair predictions."""
    if len(predicted) != len(gold.sentences):
        raise ScoringError(
            f"{len(predicted)} predictions for {len(gold.sentences)} sentences"
        )
    voc = gold.tag_vocabulary
    invalid = 0
    pairs = []
    for sent, tags in zip(gold.sentences, predicted):
        if sent.gold_tags is None:
            raise ScoringError(f"sentence {sent.id!r} has no gold tags")
        if len(tags) != len(sent):
            raise ScoringError(
                f"sentence {sent.id!r}: {len(tags)} predicted tags for {len(sent)} tokens"
            )
        invalid += count_invalid_transitions(voc, tags)
        pairs.append((sent, repair_bio(voc, tags, repair)))
    return voc, pairs, invalid


def _match_sentence(gold_spans, pred_spans):
    """Exact-match TP set plus leftover gold (FN) and predicted (FP) spans."""
    gold_set = set(gold_spans)
    tp = [s for s in pred_spans if s in gold_set]
    fn = [s for s in gold_spans if s not in set(tp)]
    fp = [s for s in pred_spans if s not in gold_set]
    return tp, fp, fn


def score(gold: Corpus, predicted, repair: str = "convert") -> MetricsReport:
    """Entity-level scores of predicted tag sequences against a gold corpus.

    predicted: one tag index sequence per sentence, in corpus order. Invalid
    BIO is repaired per `repair` before span extraction; raw violations are
    counted in the report.
    """
    voc, pairs, invalid = _prepare(gold, predicted, repair)
    counts = {t: [0, 0, 0] for t in voc.entity_types}  # tp, fp, fn
    confusion: dict[tuple[str, str], int] = {}
    for sent, tags in pairs:
        gold_spans = extract_spans(voc, sent.gold_tags)
        pred_spans = extract_spans(voc, tags)
        tp, fp, fn = _match_sentence(gold_spans, pred_spans)
        for span in tp:
            counts[span.entity_type][0] += 1
        for span in fp:
            counts[span.entity_type][1] += 1
        for span in fn:
            counts[span.entity_type][2] += 1
        for g in fn:
            for p in fp:
                if g.overlaps(p) and g.entity_type != p.entity_type:
                    key = (g.entity_type, p.entity_type)
                    confusion[key] = confusion.get(key, 0) + 1
    per_class = [ClassScore(t, *counts[t]) for t in voc.entity_types]
    return MetricsReport(per_class, confusion, invalid)


def error_breakdown(gold: Corpus, predicted, repair: str = "convert") -> ErrorBreakdown:
    """Classify every non-matching span: confusion, boundary error, miss, spurious."""
    voc, pairs, _ = _prepare(gold, predicted, repair)
    out = ErrorBreakdown()
    for sent, tags in pairs:
        gold_spans = extract_spans(voc, sent.gold_tags)
        pred_spans = extract_spans(voc, tags)
        _, fp, fn = _match_sentence(gold_spans, pred_spans)
        touched_gold = set()
        touched_pred = set()
        for g in fn:
            for p in fp:
                if not g.overlaps(p):
                    continue
                touched_gold.add(g)
                touched_pred.add(p)
                if g.entity_type == p.entity_type:
                    out.boundary.append((sent.id, g, p))
                else:
                    key = (g.entity_type, p.entity_type)
                    out.confusion[key] = out.confusion.get(key, 0) + 1
        out.misses.extend((sent.id, g) for g in fn if g not in touched_gold)
        out.spurious.extend((sent.id, p) for p in fp if p not in touched_pred)
    return out


# ---------------------------------------------------------------------------
# report rendering


def render_text(report: MetricsReport) -> str:
    """Aligned per-class table with an Average row."""
    lines = [f"{'Class':<8s} {'Prec':>8s} {'Rec':>8s} {'F1':>8s} {'TP':>6s} {'FP':>6s} {'FN':>6s}"]
    for c in report.per_class:
        lines.append(
            f"{c.entity_type:<8s} {c.precision:8.4f} {c.recall:8.4f} {c.f1:8.4f}"
            f" {c.tp:6d} {c.fp:6d} {c.fn:6d}"
        )
    lines.append(
        f"{'Average':<8s} {report.macro_precision:8.4f} {report.macro_recall:8.4f}"
        f" {report.macro_f1:8.4f}"
    )
    lines.append(f"invalid transitions: {report.invalid_transition_count}")
    return "\n".join(lines)


def render_kv(report: MetricsReport) -> str:
    """Machine-readable key=value form."""
    lines = []
    for c in report.per_class:
        t = c.entity_type
        lines.append(f"{t}.precision={c.precision:.6f}")
        lines.append(f"{t}.recall={c.recall:.6f}")
        lines.append(f"{t}.f1={c.f1:.6f}")
        lines.append(f"{t}.tp={c.tp}")
        lines.append(f"{t}.fp={c.fp}")
        lines.append(f"{t}.fn={c.fn}")
    lines.append(f"macro.precision={report.macro_precision:.6f}")
    lines.append(f"macro.recall={report.macro_recall:.6f}")
    lines.append(f"macro.f1={report.macro_f1:.6f}")
    lines.append(f"invalid_transitions={report.invalid_transition_count}")
    return "\n".join(lines)


def render_breakdown(breakdown: ErrorBreakdown, entity_types) -> str:
    """Confusion matrix and error listings, worst classes first."""
    per_class_errors = {t: 0 for t in entity_types}
    for (g, p), n in breakdown.confusion.items():
        per_class_errors[g] += n
    for _, g, _ in breakdown.boundary:
        per_class_errors[g.entity_type] += 1
    for _, g in breakdown.misses:
        per_class_errors[g.entity_type] += 1
    for _, p in breakdown.spurious:
        per_class_errors[p.entity_type] += 1

    order = sorted(entity_types, key=lambda t: -per_class_errors[t])
    lines = ["errors by class (worst first):"]
    for t in order:
        lines.append(f"  {t:<8s} {per_class_errors[t]}")
    lines.append("confusions (gold -> predicted):")
    for (g, p), n in sorted(breakdown.confusion.items()):
        lines.append(f"  {g} -> {p}: {n}")
    lines.append(f"boundary errors: {len(breakdown.boundary)}")
    for sid, g, p in breakdown.boundary:
        lines.append(f"  {sid}: {g.entity_type} gold ({g.start},{g.end}) pred ({p.start},{p.end})")
    lines.append(f"missed spans: {len(breakdown.misses)}")
    lines.append(f"spurious spans: {len(breakdown.spurious)}")
    return "\n".join(lines)
