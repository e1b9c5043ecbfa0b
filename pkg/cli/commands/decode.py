from pathlib import Path
from typing import Optional

import typer

from cli.commands.common import (
    ConfigOption,
    SeedOption,
    WorkDirOption,
    console,
    handle_errors,
    load_config,
    write_hypotheses,
)
from core.config import require_paths
from services.corpus_sim import load_corpus
from services.decoding import decode_corpus
from services.model_store import load_adapters, load_model


@handle_errors
def cmd_decode(
        config: Optional[Path] = ConfigOption,
        work_dir: Optional[str] = WorkDirOption,
        seed: Optional[int] = SeedOption,
        model: str = typer.Option("si", "--model", help="si or sat"),
        adapters: Optional[str] = typer.Option(None, "--adapters", help="Adapter set name under work_dir/adapters"),
        name: Optional[str] = typer.Option(None, "--name", help="Output name; defaults to the adapter set or model"),
):
    """
    Decode the test corpus, optionally with speaker adapters, to work_dir/decode/NAME.hyp.
    """
    cfg = load_config(config, work_dir=work_dir, seed=seed)
    model_dir = cfg.paths["model"] / model
    inputs = [model_dir, cfg.paths["corpus_test"]]
    if adapters:
        inputs.append(cfg.paths["adapters"] / adapters)
    require_paths(*inputs)

    bundle = load_model(model_dir)
    corpus = load_corpus(cfg.paths["corpus_test"])
    speaker_adapters = load_adapters(cfg.paths["adapters"] / adapters) if adapters else {}
    hypotheses = decode_corpus(bundle.net, bundle.graphs, corpus.utterances, speaker_adapters)
    target = cfg.paths["decode"] / f"{name or adapters or model}.hyp"
    write_hypotheses(hypotheses, target)
    console.print(f"[green]{len(hypotheses)} hypotheses[/green] -> {target}")
