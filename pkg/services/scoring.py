import csv
from pathlib import Path
from typing import Dict, Iterable, List, Mapping, Optional, Sequence, Tuple

import numpy as np

from core.errors import InvalidArgumentError, ScoringError
from core.logging import logger
from models.schemas import ConditionResult, ErrorCounts, MetricsReport

REPORT_FORMATS = ("json", "csv", "plotdata")
CSV_FIELDS = ["condition", "test_set", "ter", "substitutions", "insertions", "deletions",
              "reference_tokens", "baseline", "relative_reduction"]


def align_counts(reference: Sequence[str], hypothesis: Sequence[str]) -> Tuple[int, int, int]:
    """
    Unit-cost Levenshtein alignment.

    Among equal-cost alignments the backtrace prefers a substitution (or
    match), then a deletion, then an insertion.

    Returns:
        Tuple[int, int, int]: substitutions, insertions, deletions
    """
    n, m = len(reference), len(hypothesis)
    cost = np.zeros((n + 1, m + 1), dtype=np.int64)
    cost[:, 0] = np.arange(n + 1)
    cost[0, :] = np.arange(m + 1)
    for i in range(1, n + 1):
        for j in range(1, m + 1):
            diag = cost[i - 1, j - 1] + (reference[i - 1] != hypothesis[j - 1])
            cost[i, j] = min(diag, cost[i - 1, j] + 1, cost[i, j - 1] + 1)

    subs = ins = dels = 0
    i, j = n, m
    while i > 0 or j > 0:
        if i > 0 and j > 0 and cost[i, j] == cost[i - 1, j - 1] + (reference[i - 1] != hypothesis[j - 1]):
            subs += int(reference[i - 1] != hypothesis[j - 1])
            i, j = i - 1, j - 1
        elif i > 0 and cost[i, j] == cost[i - 1, j] + 1:
            dels += 1
            i -= 1
        else:
            ins += 1
            j -= 1
    return subs, ins, dels


def score_token_error_rate(hypotheses: Mapping[str, Sequence[str]], references: Mapping[str, Sequence[str]],
                           condition: str = "eval", test_set: str = "test",
                           speaker_of: Optional[Mapping[str, str]] = None,
                           ignore: Iterable[str] = ()) -> ConditionResult:
    """
    Token error rate (S + I + D) / N over matched utterances.

    Args:
        hypotheses: Hypothesis tokens by utterance id
        references: Reference tokens by utterance id
        condition (str): Condition name stored in the result
        test_set (str): Test set name stored in the result
        speaker_of: Utterance id -> speaker id, for the per-speaker breakdown
        ignore: Tokens removed from both sides before alignment (silence)

    Returns:
        ConditionResult: Totals and per-speaker counts

    Raises:
        ScoringError: the id sets differ; lists every unmatched id
    """
    missing = set(hypotheses) ^ set(references)
    if missing:
        raise ScoringError(f"{len(missing)} utterance id(s) present on one side only", missing)
    ignore = set(ignore)
    total = ErrorCounts()
    per_speaker: Dict[str, ErrorCounts] = {}
    for utt_id in sorted(references):
        ref = [tok for tok in references[utt_id] if tok not in ignore]
        hyp = [tok for tok in hypotheses[utt_id] if tok not in ignore]
        subs, ins, dels = align_counts(ref, hyp)
        counts = ErrorCounts.from_counts(subs, ins, dels, len(ref))
        total = total + counts
        if speaker_of is not None:
            speaker = speaker_of[utt_id]
            per_speaker[speaker] = per_speaker.get(speaker, ErrorCounts()) + counts
    logger.info(f"Scored {condition}/{test_set}: TER={total.ter:.4f} over {total.reference_tokens} tokens")
    return ConditionResult(condition=condition, test_set=test_set, counts=total, per_speaker=per_speaker)


def apply_baseline(report: MetricsReport, baseline: str) -> MetricsReport:
    """Fill relative reductions against the stored TER of ``baseline`` on each test set."""
    stored = {(c.condition, c.test_set): c.counts.ter for c in report.conditions}
    conditions = []
    for result in report.conditions:
        base = stored.get((baseline, result.test_set))
        reduction = None
        if base is not None and base > 0.0:
            reduction = (base - result.counts.ter) / base
        conditions.append(result.model_copy(update={"baseline": baseline, "relative_reduction": reduction}))
    return report.model_copy(update={"baseline": baseline, "conditions": conditions})


def emit_report(report: MetricsReport, out_dir: Path, formats: Sequence[str] = REPORT_FORMATS) -> List[Path]:
    """
    Write ``metrics.json``, ``metrics.csv`` and/or ``plotdata.tsv``.

    The CSV has one row per (condition, test set). The plot data lists the
    data-amount sweep as (condition, utterances per speaker, TER).

    Returns:
        List[Path]: Files written
    """
    unknown = set(formats) - set(REPORT_FORMATS)
    if unknown:
        raise InvalidArgumentError(f"Unknown report format(s): {sorted(unknown)}")
    out_dir = Path(out_dir)
    out_dir.mkdir(parents=True, exist_ok=True)
    written: List[Path] = []

    if "json" in formats:
        path = out_dir / "metrics.json"
        path.write_text(report.model_dump_json(indent=2) + "\n", encoding="utf-8")
        written.append(path)

    if "csv" in formats:
        path = out_dir / "metrics.csv"
        with path.open("w", newline="", encoding="utf-8") as fh:
            writer = csv.DictWriter(fh, fieldnames=CSV_FIELDS, lineterminator="\n")
            writer.writeheader()
            for result in report.conditions:
                writer.writerow({
                    "condition": result.condition,
                    "test_set": result.test_set,
                    "ter": result.counts.ter,
                    "substitutions": result.counts.substitutions,
                    "insertions": result.counts.insertions,
                    "deletions": result.counts.deletions,
                    "reference_tokens": result.counts.reference_tokens,
                    "baseline": result.baseline or "",
                    "relative_reduction": "" if result.relative_reduction is None else result.relative_reduction,
                })
        written.append(path)

    if "plotdata" in formats:
        path = out_dir / "plotdata.tsv"
        lines = ["condition\tutterances_per_speaker\tter"]
        for point in sorted(report.sweep, key=lambda p: (p.condition, p.utterances_per_speaker)):
            lines.append(f"{point.condition}\t{point.utterances_per_speaker}\t{point.ter!r}")
        path.write_text("\n".join(lines) + "\n", encoding="utf-8")
        written.append(path)

    logger.info(f"Wrote report files: {', '.join(p.name for p in written)}")
    return written
