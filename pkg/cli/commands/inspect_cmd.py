from pathlib import Path
from typing import Optional

import typer

from cli.commands.common import ConfigOption, SeedOption, WorkDirOption, console, handle_errors, load_config
from core.config import require_paths
from core.errors import InvalidArgumentError
from services.acoustic_net import forward
from services.corpus_sim import load_corpus
from services.graph_inference import generate_lattice
from services.model_store import load_model
from utils.binary_io import load_adapter, load_graph
from utils.text_dump import dump_adapter, dump_graph, dump_lattice


@handle_errors
def cmd_inspect(
        kind: str = typer.Argument(..., help="graph, adapter or lattice"),
        target: str = typer.Argument(..., help="File (.lfg/.lfa), or an utterance id for lattice"),
        model: str = typer.Option("si", "--model", help="Model used for lattices"),
        beam: Optional[float] = typer.Option(None, "--beam", help="Lattice beam; defaults to the config value"),
        config: Optional[Path] = ConfigOption,
        work_dir: Optional[str] = WorkDirOption,
        seed: Optional[int] = SeedOption,
):
    """
    Dump a graph, an adapter or the lattice of one test utterance as text.
    """
    if kind == "graph":
        require_paths(Path(target))
        console.print(dump_graph(load_graph(Path(target))), end="", markup=False)
    elif kind == "adapter":
        require_paths(Path(target))
        console.print(dump_adapter(load_adapter(Path(target))), end="", markup=False)
    elif kind == "lattice":
        cfg = load_config(config, work_dir=work_dir, seed=seed, beam=beam)
        model_dir = cfg.paths["model"] / model
        require_paths(model_dir, cfg.paths["corpus_test"])
        bundle = load_model(model_dir)
        corpus = load_corpus(cfg.paths["corpus_test"])
        matches = [u for u in corpus.utterances if u.id == target]
        if not matches:
            raise InvalidArgumentError(f"No test utterance with id {target}")
        scores, _, _ = forward(bundle.net, matches[0].features)
        lattice = generate_lattice(bundle.graphs.decode, scores, cfg.beam)
        console.print(dump_lattice(lattice, bundle.graphs.inventory), end="", markup=False)
    else:
        raise InvalidArgumentError(f"Unknown kind: {kind}")
