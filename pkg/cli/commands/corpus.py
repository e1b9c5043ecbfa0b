from pathlib import Path
from typing import Optional

import typer

from cli.commands.common import ConfigOption, SeedOption, WorkDirOption, console, handle_errors, load_config
from core.errors import InvalidArgumentError
from services.corpus_sim import save_corpus
from services.experiment import make_corpus


@handle_errors
def cmd_corpus(
        config: Optional[Path] = ConfigOption,
        work_dir: Optional[str] = WorkDirOption,
        seed: Optional[int] = SeedOption,
        split: str = typer.Option("all", help="train, test or all"),
):
    """
    Generate the synthetic train/test corpora under work_dir/corpus.
    """
    cfg = load_config(config, work_dir=work_dir, seed=seed)
    splits = ["train", "test"] if split == "all" else [split]
    for name in splits:
        if name not in ("train", "test"):
            raise InvalidArgumentError(f"Unknown split: {name}")
        corpus = make_corpus(cfg, name)
        save_corpus(corpus, cfg.paths[f"corpus_{name}"])
        console.print(f"[green]{name}[/green]: {len(corpus.utterances)} utterances, "
                      f"{len(corpus.speakers)} speakers -> {cfg.paths[f'corpus_{name}']}")
