from typing import List, Optional

import numpy as np

from models.domain import NO_LABEL, Lattice, SpeakerAdapter, TokenInventory, WeightedGraph


def _token(label: int, inventory: Optional[TokenInventory]) -> str:
    if label == NO_LABEL:
        return "-"
    return inventory.tokens[label] if inventory is not None else str(label)


def dump_graph(graph: WeightedGraph, inventory: Optional[TokenInventory] = None) -> str:
    """One arc per line: ``src dst pdf olabel log_weight``, then ``final state log_weight`` lines."""
    lines: List[str] = [f"# states={graph.num_states} arcs={graph.num_arcs} start={graph.start} "
                        f"pdfs={graph.pdf_count}"]
    for i in range(graph.num_arcs):
        lines.append(f"{graph.src[i]} {graph.dst[i]} {graph.pdf[i]} "
                     f"{_token(int(graph.olabel[i]), inventory)} {graph.log_weight[i]:.6f}")
    for state in graph.finals:
        lines.append(f"final {state} {graph.final_log_weight[state]:.6f}")
    return "\n".join(lines) + "\n"


def dump_lattice(lattice: Lattice, inventory: Optional[TokenInventory] = None) -> str:
    lines = [f"# frames={lattice.num_frames} nodes={lattice.num_nodes} arcs={lattice.num_arcs} beam={lattice.beam}"]
    for i in range(lattice.num_arcs):
        lines.append(f"t={lattice.frame[i]} {lattice.src[i]} {lattice.dst[i]} pdf={lattice.pdf[i]} "
                     f"{_token(int(lattice.olabel[i]), inventory)} graph={lattice.graph_score[i]:.6f} "
                     f"am={lattice.acoustic_score[i]:.6f}")
    return "\n".join(lines) + "\n"


def dump_adapter(adapter: SpeakerAdapter) -> str:
    lines = [f"# speaker={adapter.speaker_id} mode={adapter.mode} layers={list(adapter.layers)}"]
    for name in sorted(adapter.params):
        values = np.asarray(adapter.params[name])
        lines.append(f"{name} " + " ".join(f"{v:.6f}" for v in values))
    return "\n".join(lines) + "\n"
