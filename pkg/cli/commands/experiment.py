from pathlib import Path
from typing import Optional

import typer

from cli.commands.common import (
    ConfigOption,
    SeedOption,
    WorkDirOption,
    handle_errors,
    load_config,
    print_report,
)
from core.errors import InvalidArgumentError
from services.corpus_sim import save_corpus
from services.experiment import ADAPTATION_CONDITIONS, CRITERIA, make_corpus, run_experiment, train_model
from services.model_store import save_model
from services.scoring import emit_report


@handle_errors
def cmd_experiment(
        config: Optional[Path] = ConfigOption,
        work_dir: Optional[str] = WorkDirOption,
        seed: Optional[int] = SeedOption,
        criteria: str = typer.Option(",".join(CRITERIA), "--criteria", help="Comma-separated adaptation criteria"),
        conditions: Optional[str] = typer.Option(None, "--conditions", help="Comma-separated subset of conditions"),
        sweep: bool = typer.Option(True, "--sweep/--no-sweep", help="Run the data-amount sweep"),
):
    """
    Full pipeline: corpora, SI and SAT training, the adaptation grid, the sweep and all report formats.
    """
    cfg = load_config(config, work_dir=work_dir, seed=seed)
    names = None
    if conditions:
        names = [c.strip() for c in conditions.split(",") if c.strip()]
        unknown = sorted(set(names) - set(ADAPTATION_CONDITIONS))
        if unknown:
            raise InvalidArgumentError(f"Unknown condition(s): {', '.join(unknown)}")
    criteria_list = [c.strip() for c in criteria.split(",") if c.strip()]
    bad_criteria = sorted(set(criteria_list) - set(CRITERIA))
    if bad_criteria or not criteria_list:
        raise InvalidArgumentError(f"Criteria must be a non-empty subset of {', '.join(CRITERIA)}")

    train_corpus = make_corpus(cfg, "train")
    test_corpus = make_corpus(cfg, "test")
    save_corpus(train_corpus, cfg.paths["corpus_train"])
    save_corpus(test_corpus, cfg.paths["corpus_test"])

    models = {"si": train_model(cfg, train_corpus)}
    save_model(models["si"], cfg.paths["model"] / "si")
    if any(ADAPTATION_CONDITIONS[n][0] == "sat" for n in (names or ADAPTATION_CONDITIONS)):
        models["sat"] = train_model(cfg, train_corpus, sat=True)
        save_model(models["sat"], cfg.paths["model"] / "sat")

    report = run_experiment(cfg, criteria=criteria_list, conditions=names, sweep=sweep, models=models,
                            test_corpus=test_corpus)
    emit_report(report, cfg.paths["reports"])
    print_report(report)
