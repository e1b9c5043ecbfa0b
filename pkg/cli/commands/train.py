from pathlib import Path
from typing import Optional

import typer

from cli.commands.common import ConfigOption, SeedOption, WorkDirOption, console, handle_errors, load_config
from core.config import require_paths
from services.corpus_sim import load_corpus
from services.experiment import train_model
from services.model_store import save_model


def _train(config: Optional[Path], work_dir: Optional[str], seed: Optional[int], epochs: Optional[int],
           sat: bool) -> None:
    cfg = load_config(config, work_dir=work_dir, seed=seed, train_epochs=epochs)
    require_paths(cfg.paths["corpus_train"])
    corpus = load_corpus(cfg.paths["corpus_train"])
    bundle = train_model(cfg, corpus, sat=sat)
    target = cfg.paths["model"] / ("sat" if sat else "si")
    save_model(bundle, target)
    console.print(f"[green]{'SAT' if sat else 'SI'} model[/green] -> {target} "
                  f"(checksum {bundle.net.checksum()[:12]})")


@handle_errors
def cmd_train(
        config: Optional[Path] = ConfigOption,
        work_dir: Optional[str] = WorkDirOption,
        seed: Optional[int] = SeedOption,
        epochs: Optional[int] = typer.Option(None, "--epochs", help="Overrides train_epochs"),
):
    """
    Train the speaker-independent model on the training corpus.
    """
    _train(config, work_dir, seed, epochs, sat=False)


@handle_errors
def cmd_sat(
        config: Optional[Path] = ConfigOption,
        work_dir: Optional[str] = WorkDirOption,
        seed: Optional[int] = SeedOption,
        epochs: Optional[int] = typer.Option(None, "--epochs", help="Overrides train_epochs"),
):
    """
    Speaker adaptive training with LHUC adapters on sat_layers.
    """
    _train(config, work_dir, seed, epochs, sat=True)
