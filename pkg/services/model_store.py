import json
from dataclasses import dataclass, field
from pathlib import Path
from typing import Dict, Mapping

from core.errors import ConfigError
from core.logging import logger
from models.domain import AcousticNet, GraphSet, SpeakerAdapter, TokenInventory
from services.token_graphs import build_hmm_topology
from utils.binary_io import load_adapter, load_graph, load_lm, load_net, save_adapter, save_graph, save_lm, save_net

MODEL_FILE = "model.json"


@dataclass
class ModelBundle:
    """Trained net, shared graphs and SAT adapters as stored in a model directory."""

    net: AcousticNet
    graphs: GraphSet
    sat_adapters: Dict[str, SpeakerAdapter] = field(default_factory=dict)
    sat_layers: tuple = ()


def save_adapters(adapters: Mapping[str, SpeakerAdapter], directory: Path) -> None:
    directory = Path(directory)
    directory.mkdir(parents=True, exist_ok=True)
    for speaker, adapter in sorted(adapters.items()):
        save_adapter(adapter, directory / f"{speaker}.lfa")


def load_adapters(directory: Path) -> Dict[str, SpeakerAdapter]:
    directory = Path(directory)
    if not directory.exists():
        return {}
    adapters = {}
    for path in sorted(directory.glob("*.lfa")):
        adapter = load_adapter(path)
        adapters[adapter.speaker_id] = adapter
    return adapters


def save_model(bundle: ModelBundle, directory: Path) -> None:
    """
    Write net.lfn, lm.json, den.lfg, decode.lfg, model.json and sat/*.lfa.

    Args:
        bundle (ModelBundle): Model to store
        directory (Path): Target directory, created if needed
    """
    directory = Path(directory)
    directory.mkdir(parents=True, exist_ok=True)
    graphs = bundle.graphs
    save_net(bundle.net, directory / "net.lfn")
    save_lm(graphs.lm, directory / "lm.json")
    save_graph(graphs.den, directory / "den.lfg")
    save_graph(graphs.decode, directory / "decode.lfg")
    if bundle.sat_adapters:
        save_adapters(bundle.sat_adapters, directory / "sat")
    meta = {
        "tokens": list(graphs.inventory.tokens),
        "silence_token": graphs.inventory.silence_token,
        "context_mode": graphs.inventory.context_mode,
        "states_per_unit": graphs.topology.states_per_unit,
        "sat_layers": list(bundle.sat_layers),
        "net_checksum": bundle.net.checksum(),
    }
    (directory / MODEL_FILE).write_text(json.dumps(meta, indent=2), encoding="utf-8")
    logger.info(f"Saved model bundle to {directory}")


def load_model(directory: Path) -> ModelBundle:
    directory = Path(directory)
    meta_path = directory / MODEL_FILE
    if not meta_path.exists():
        raise ConfigError(f"No model found in {directory}", [str(meta_path)])
    meta = json.loads(meta_path.read_text(encoding="utf-8"))
    inventory = TokenInventory(tokens=tuple(meta["tokens"]), silence_token=meta["silence_token"],
                               context_mode=meta["context_mode"])
    graphs = GraphSet(
        inventory=inventory,
        topology=build_hmm_topology(meta["states_per_unit"]),
        lm=load_lm(directory / "lm.json"),
        den=load_graph(directory / "den.lfg"),
        decode=load_graph(directory / "decode.lfg"),
    )
    return ModelBundle(net=load_net(directory / "net.lfn"), graphs=graphs,
                       sat_adapters=load_adapters(directory / "sat"), sat_layers=tuple(meta["sat_layers"]))
