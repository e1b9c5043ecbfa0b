import typer

from cli.commands.adapt import cmd_adapt
from cli.commands.corpus import cmd_corpus
from cli.commands.decode import cmd_decode
from cli.commands.experiment import cmd_experiment
from cli.commands.inspect_cmd import cmd_inspect
from cli.commands.report import cmd_report
from cli.commands.score import cmd_score
from cli.commands.train import cmd_sat, cmd_train
from core.config import settings

app = typer.Typer(name=settings.APP_TITLE, help=settings.APP_DESCRIPTION, add_completion=False,
                  no_args_is_help=True)

app.command("corpus")(cmd_corpus)
app.command("train")(cmd_train)
app.command("sat")(cmd_sat)
app.command("adapt")(cmd_adapt)
app.command("decode")(cmd_decode)
app.command("score")(cmd_score)
app.command("report")(cmd_report)
app.command("inspect")(cmd_inspect)
app.command("experiment")(cmd_experiment)
