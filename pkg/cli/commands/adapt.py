from pathlib import Path
from typing import Optional

import typer

from cli.commands.common import ConfigOption, SeedOption, WorkDirOption, console, handle_errors, load_config
from core.config import require_paths
from services.adaptation import run_unsupervised_adaptation
from services.corpus_sim import load_corpus
from services.model_store import load_model, save_adapters


@handle_errors
def cmd_adapt(
        config: Optional[Path] = ConfigOption,
        work_dir: Optional[str] = WorkDirOption,
        seed: Optional[int] = SeedOption,
        model: str = typer.Option("si", "--model", help="si or sat"),
        method: Optional[str] = typer.Option(None, "--method", help="lhuc, blhuc, map or kl"),
        criterion: Optional[str] = typer.Option(None, "--criterion", help="ce or mmi+ce"),
        oracle: Optional[bool] = typer.Option(None, "--oracle/--no-oracle", help="Use reference labels"),
        select_rate: Optional[float] = typer.Option(None, "--select-rate", help="Enable confidence selection"),
        epochs: Optional[int] = typer.Option(None, "--epochs", help="Overrides adapt_epochs"),
        max_utts: Optional[int] = typer.Option(None, "--max-utts", help="Adaptation utterances per speaker"),
        supervision: Optional[str] = typer.Option(None, "--supervision", help="lattice-free or alignment"),
        name: Optional[str] = typer.Option(None, "--name", help="Adapter set name"),
):
    """
    Estimate one adapter per test speaker and write them to work_dir/adapters/NAME.
    """
    cfg = load_config(config, work_dir=work_dir, seed=seed, method=method, criterion=criterion, oracle=oracle,
                      use_confidence=True if select_rate is not None else None, selection_rate=select_rate,
                      adapt_epochs=epochs, max_utterances=max_utts, supervision=supervision)
    model_dir = cfg.paths["model"] / model
    require_paths(model_dir, cfg.paths["corpus_test"])
    bundle = load_model(model_dir)
    corpus = load_corpus(cfg.paths["corpus_test"])
    adapt_cfg = cfg.adapt_config()

    adapters = run_unsupervised_adaptation(bundle.net, bundle.graphs, corpus.by_speaker(), adapt_cfg,
                                           corpus.silence)
    name = name or f"{model}-{adapt_cfg.method}-{cfg.criterion}"
    target = cfg.paths["adapters"] / name
    save_adapters(adapters, target)
    console.print(f"[green]{len(adapters)} adapters[/green] -> {target}")
