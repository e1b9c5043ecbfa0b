import functools
import json
import sys
from pathlib import Path
from typing import Any, Dict, Mapping, Optional, Tuple

import typer
from pydantic import ValidationError
from rich.console import Console
from rich.table import Table

from core.config import ExperimentConfig, load_experiment_config
from core.errors import ConfigError, LfmmiError
from core.logging import logger
from models.domain import Utterance
from models.schemas import MetricsReport

console = Console()

ConfigOption = typer.Option(None, "--config", "-c", help="Flat key=value experiment config file")
WorkDirOption = typer.Option(None, "--work-dir", help="Overrides work_dir")
SeedOption = typer.Option(None, "--seed", help="Overrides seed")


def fail(error: LfmmiError) -> None:
    """Print the machine-readable error body on stderr and exit with the error's code."""
    body = {
        "error": type(error).__name__,
        "message": str(error),
        "fields": getattr(error, "fields", None) or getattr(error, "missing_ids", None) or [],
    }
    record_id = getattr(error, "record_id", None)
    if record_id is not None:
        body["fields"] = [record_id]
    sys.stderr.write(json.dumps(body) + "\n")
    raise typer.Exit(code=error.exit_code)


def handle_errors(command):
    """Map toolkit errors to exit codes; anything else exits with 1."""

    @functools.wraps(command)
    def wrapper(*args, **kwargs):
        try:
            return command(*args, **kwargs)
        except typer.Exit:
            raise
        except LfmmiError as e:
            logger.error(f"{command.__name__} failed: {e}")
            fail(e)
        except ValidationError as e:
            fields = [".".join(str(p) for p in err["loc"]) for err in e.errors()]
            fail(ConfigError(f"Invalid configuration: {e.error_count()} violation(s)", fields))
        except Exception as e:
            logger.error(f"{command.__name__} failed unexpectedly: {str(e)}")
            sys.stderr.write(json.dumps({"error": type(e).__name__, "message": str(e), "fields": []}) + "\n")
            raise typer.Exit(code=1)

    return wrapper


def load_config(config: Optional[Path], **overrides: Any) -> ExperimentConfig:
    return load_experiment_config(config, {k: v for k, v in overrides.items() if v is not None})


def write_hypotheses(hypotheses: Mapping[str, Tuple[str, ...]], path: Path) -> None:
    path.parent.mkdir(parents=True, exist_ok=True)
    lines = [f"{utt_id}\t{' '.join(tokens)}" for utt_id, tokens in sorted(hypotheses.items())]
    path.write_text("\n".join(lines) + "\n", encoding="utf-8")


def read_hypotheses(path: Path) -> Dict[str, Tuple[str, ...]]:
    hypotheses: Dict[str, Tuple[str, ...]] = {}
    for line in Path(path).read_text(encoding="utf-8").splitlines():
        if not line.strip():
            continue
        utt_id, _, tokens = line.partition("\t")
        hypotheses[utt_id] = tuple(tokens.split())
    return hypotheses


def load_report(path: Path, seed: int) -> MetricsReport:
    if Path(path).exists():
        return MetricsReport.model_validate_json(Path(path).read_text(encoding="utf-8"))
    return MetricsReport(seed=seed)


def print_report(report: MetricsReport) -> None:
    table = Table(title=f"Token error rates (seed {report.seed})")
    for column in ("condition", "test set", "TER", "S", "I", "D", "N", "rel. red."):
        table.add_column(column)
    for result in report.conditions:
        counts = result.counts
        reduction = "" if result.relative_reduction is None else f"{100 * result.relative_reduction:.1f}%"
        table.add_row(result.condition, result.test_set, f"{100 * counts.ter:.2f}%", str(counts.substitutions),
                      str(counts.insertions), str(counts.deletions), str(counts.reference_tokens), reduction)
    console.print(table)


def speakers_of(utterances: Tuple[Utterance, ...]) -> Dict[str, str]:
    return {u.id: u.speaker_id for u in utterances}
