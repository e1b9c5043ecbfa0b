from pathlib import Path
from typing import Optional

import typer

from cli.commands.common import ConfigOption, WorkDirOption, console, handle_errors, load_config, print_report
from core.config import require_paths
from models.schemas import MetricsReport
from services.scoring import REPORT_FORMATS, emit_report


@handle_errors
def cmd_report(
        config: Optional[Path] = ConfigOption,
        work_dir: Optional[str] = WorkDirOption,
        formats: str = typer.Option(",".join(REPORT_FORMATS), "--formats", help="Comma-separated: json,csv,plotdata"),
):
    """
    Re-emit work_dir/reports/metrics.json in the requested formats.
    """
    cfg = load_config(config, work_dir=work_dir)
    metrics_path = cfg.paths["reports"] / "metrics.json"
    require_paths(metrics_path)
    report = MetricsReport.model_validate_json(metrics_path.read_text(encoding="utf-8"))
    written = emit_report(report, cfg.paths["reports"], [f.strip() for f in formats.split(",") if f.strip()])
    print_report(report)
    for path in written:
        console.print(f"wrote {path}")
