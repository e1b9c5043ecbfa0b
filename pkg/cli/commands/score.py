from pathlib import Path
from typing import Optional

import typer

from cli.commands.common import (
    ConfigOption,
    SeedOption,
    WorkDirOption,
    handle_errors,
    load_config,
    load_report,
    print_report,
    read_hypotheses,
    speakers_of,
)
from core.config import require_paths
from services.corpus_sim import load_corpus
from services.scoring import apply_baseline, emit_report, score_token_error_rate


@handle_errors
def cmd_score(
        hypotheses: Path = typer.Argument(..., help="Hypothesis file written by decode"),
        condition: Optional[str] = typer.Option(None, "--condition", help="Condition name; defaults to the file stem"),
        baseline: Optional[str] = typer.Option(None, "--baseline", help="Stored condition to compare against"),
        config: Optional[Path] = ConfigOption,
        work_dir: Optional[str] = WorkDirOption,
        seed: Optional[int] = SeedOption,
):
    """
    Score a hypothesis file against the test references and record it in metrics.json.
    """
    cfg = load_config(config, work_dir=work_dir, seed=seed)
    require_paths(hypotheses, cfg.paths["corpus_test"])
    corpus = load_corpus(cfg.paths["corpus_test"])
    references = {u.id: u.labels for u in corpus.utterances}
    result = score_token_error_rate(read_hypotheses(hypotheses), references, condition=condition or hypotheses.stem,
                                    test_set=corpus.name, speaker_of=speakers_of(corpus.utterances),
                                    ignore=[corpus.inventory.silence_token])

    metrics_path = cfg.paths["reports"] / "metrics.json"
    report = load_report(metrics_path, cfg.seed)
    kept = [c for c in report.conditions if (c.condition, c.test_set) != (result.condition, result.test_set)]
    report = report.model_copy(update={"conditions": kept + [result]})
    if baseline or report.baseline:
        report = apply_baseline(report, baseline or report.baseline)
    emit_report(report, cfg.paths["reports"], ["json"])
    print_report(report)
