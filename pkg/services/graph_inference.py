"""
Log-semiring inference over epsilon-free graphs.

Every arc consumes one frame, so a path of T arcs scores
``sum(arc log weights) + sum(scores[t, pdf_t]) + final log weight``.
All accumulation is float64 with max-subtracted log-sum-exp.
"""
from typing import Dict, List, Tuple

import numpy as np
from scipy.special import logsumexp

from core.errors import InfeasibleGraphError, InvalidArgumentError
from core.logging import logger
from models.domain import BestPath, FrameScores, Lattice, NO_LABEL, PosteriorTable, WeightedGraph


def _check_scores(graph: WeightedGraph, scores: FrameScores) -> np.ndarray:
    scores = np.asarray(scores, dtype=np.float64)
    if scores.ndim != 2 or scores.shape[0] == 0:
        raise InvalidArgumentError(f"Frame scores must be a non-empty frames x pdfs matrix, got shape {scores.shape}")
    if scores.shape[1] != graph.pdf_count:
        raise InvalidArgumentError(f"Scores have {scores.shape[1]} columns, graph has {graph.pdf_count} pdfs")
    if not np.all(np.isfinite(scores)):
        raise InvalidArgumentError("Frame scores must be finite")
    if graph.num_arcs == 0:
        raise InvalidArgumentError("Graph has no arcs")
    if np.any(graph.pdf < 0):
        raise InvalidArgumentError("Inference requires an epsilon-free graph")
    return scores


def _segment_logsumexp(values: np.ndarray, segment: np.ndarray, size: int) -> np.ndarray:
    peak = np.full(size, -np.inf)
    np.maximum.at(peak, segment, values)
    shift = np.where(np.isfinite(peak), peak, 0.0)
    total = np.bincount(segment, weights=np.exp(values - shift[segment]), minlength=size)
    with np.errstate(divide="ignore"):
        return np.log(total) + shift


def _forward(graph: WeightedGraph, emit: np.ndarray) -> np.ndarray:
    frames = emit.shape[0]
    alpha = np.full((frames + 1, graph.num_states), -np.inf)
    alpha[0, graph.start] = 0.0
    for t in range(frames):
        alpha[t + 1] = _segment_logsumexp(alpha[t, graph.src] + graph.log_weight + emit[t],
                                          graph.dst, graph.num_states)
    return alpha


def _backward(graph: WeightedGraph, emit: np.ndarray) -> np.ndarray:
    frames = emit.shape[0]
    beta = np.full((frames + 1, graph.num_states), -np.inf)
    beta[frames] = graph.final_log_weight
    for t in reversed(range(frames)):
        beta[t] = _segment_logsumexp(beta[t + 1, graph.dst] + graph.log_weight + emit[t],
                                     graph.src, graph.num_states)
    return beta


def forward_backward(graph: WeightedGraph, scores: FrameScores) -> Tuple[float, PosteriorTable]:
    """
    Total path log-probability and per-frame pdf occupancies.

    Args:
        graph (WeightedGraph): Epsilon-free graph
        scores (FrameScores): frames x pdf_count log-scores

    Returns:
        Tuple[float, PosteriorTable]: log_total and a row-stochastic occupancy table

    Raises:
        InfeasibleGraphError: no complete path of ``len(scores)`` frames
    """
    scores = _check_scores(graph, scores)
    emit = scores[:, graph.pdf]
    alpha = _forward(graph, emit)
    with np.errstate(divide="ignore"):
        log_total = float(logsumexp(alpha[-1] + graph.final_log_weight))
    if not np.isfinite(log_total):
        raise InfeasibleGraphError(f"No complete path of {scores.shape[0]} frames")
    beta = _backward(graph, emit)

    arc_post = np.exp(alpha[:-1, graph.src] + graph.log_weight + emit + beta[1:, graph.dst] - log_total)
    frames, pdfs = scores.shape
    flat = (np.arange(frames)[:, None] * pdfs + graph.pdf[None, :]).ravel()
    occupancies = np.bincount(flat, weights=arc_post.ravel(), minlength=frames * pdfs).reshape(frames, pdfs)
    return log_total, occupancies


def _viterbi_forward(graph: WeightedGraph, emit: np.ndarray) -> Tuple[np.ndarray, np.ndarray]:
    frames = emit.shape[0]
    arc_index = np.arange(graph.num_arcs)
    delta = np.full((frames + 1, graph.num_states), -np.inf)
    delta[0, graph.start] = 0.0
    back = np.full((frames, graph.num_states), -1, dtype=np.int64)
    for t in range(frames):
        values = delta[t, graph.src] + graph.log_weight + emit[t]
        best = np.full(graph.num_states, -np.inf)
        np.maximum.at(best, graph.dst, values)
        winners = np.isfinite(values) & (values == best[graph.dst])
        # lowest arc index among equal scores
        choice = np.full(graph.num_states, graph.num_arcs)
        np.minimum.at(choice, graph.dst[winners], arc_index[winners])
        delta[t + 1] = best
        back[t] = np.where(choice == graph.num_arcs, -1, choice)
    return delta, back


def _viterbi_backward(graph: WeightedGraph, emit: np.ndarray) -> np.ndarray:
    frames = emit.shape[0]
    gamma = np.full((frames + 1, graph.num_states), -np.inf)
    gamma[frames] = graph.final_log_weight
    for t in reversed(range(frames)):
        values = gamma[t + 1, graph.dst] + graph.log_weight + emit[t]
        np.maximum.at(gamma[t], graph.src, values)
    return gamma


def viterbi_best_path(graph: WeightedGraph, scores: FrameScores) -> BestPath:
    """
    Highest-scoring complete path.

    Ties go to the lowest final state index, then the lowest arc index at
    each frame.

    Returns:
        BestPath: arcs, graph states after each frame, pdfs, output tokens and score
    """
    scores = _check_scores(graph, scores)
    emit = scores[:, graph.pdf]
    delta, back = _viterbi_forward(graph, emit)
    ending = delta[-1] + graph.final_log_weight
    state = int(np.argmax(ending))
    if not np.isfinite(ending[state]):
        raise InfeasibleGraphError(f"No complete path of {scores.shape[0]} frames")

    arcs = []
    for t in reversed(range(scores.shape[0])):
        arc = int(back[t, state])
        arcs.append(arc)
        state = int(graph.src[arc])
    arcs.reverse()
    return BestPath(
        arcs=tuple(arcs),
        states=tuple(int(graph.dst[a]) for a in arcs),
        pdfs=tuple(int(graph.pdf[a]) for a in arcs),
        tokens=tuple(int(graph.olabel[a]) for a in arcs if graph.olabel[a] != NO_LABEL),
        score=float(ending[int(np.argmax(ending))]),
    )


# slack tolerance when comparing accumulated reduced costs against the beam
BEAM_TOLERANCE = 1e-9
DEFAULT_MAX_LATTICE_NODES = 50_000
FREE = -1.0


class _LatticeTooLarge(Exception):
    pass


def _worst_backward(graph: WeightedGraph, emit: np.ndarray, gamma: np.ndarray) -> np.ndarray:
    """Lowest completion score from each (frame, state) over paths that can complete."""
    frames = emit.shape[0]
    worst = np.full((frames + 1, graph.num_states), np.inf)
    worst[frames] = np.where(np.isfinite(graph.final_log_weight), graph.final_log_weight, np.inf)
    for t in reversed(range(frames)):
        values = worst[t + 1, graph.dst] + graph.log_weight + emit[t]
        values = np.where(np.isfinite(gamma[t + 1, graph.dst]), values, np.inf)
        np.minimum.at(worst[t], graph.src, values)
    return worst


def _expand_lattice(graph: WeightedGraph, emit: np.ndarray, gamma: np.ndarray, spread: np.ndarray,
                    beam: float, max_nodes: int):
    frames = emit.shape[0]
    arc_bounds = np.searchsorted(graph.src, np.arange(graph.num_states + 1))
    node_frame: List[int] = [0]
    node_state: List[int] = [graph.start]
    arc_src: List[int] = []
    arc_dst: List[int] = []
    arc_id: List[int] = []
    arc_frame: List[int] = []
    bounded = 0

    start_used = FREE if beam >= spread[0, graph.start] - BEAM_TOLERANCE else 0.0
    frontier: Dict[Tuple[int, float], Tuple[int, float]] = {(graph.start, start_used): (0, 0.0)}
    for t in range(frames):
        upcoming: Dict[Tuple[int, float], Tuple[int, float]] = {}
        for key in sorted(frontier):
            state, slot = key
            node, used = frontier[key]
            lo, hi = arc_bounds[state], arc_bounds[state + 1]
            dst = graph.dst[lo:hi]
            ahead = gamma[t + 1, dst]
            reduced = gamma[t, state] - (graph.log_weight[lo:hi] + emit[t, lo:hi] + ahead)
            for offset in np.flatnonzero(np.isfinite(ahead)):
                nxt = int(dst[offset])
                if slot == FREE:
                    child_key, child_used = (nxt, FREE), 0.0
                else:
                    child_used = used + max(float(reduced[offset]), 0.0)
                    if child_used > beam + BEAM_TOLERANCE:
                        continue
                    if beam - child_used >= spread[t + 1, nxt] - BEAM_TOLERANCE:
                        child_key = (nxt, FREE)
                    else:
                        child_key = (nxt, round(child_used, 9))
                if child_key not in upcoming:
                    upcoming[child_key] = (len(node_frame), child_used)
                    node_frame.append(t + 1)
                    node_state.append(nxt)
                    if child_key[1] != FREE:
                        bounded += 1
                        if bounded > max_nodes:
                            raise _LatticeTooLarge()
                arc_src.append(node)
                arc_dst.append(upcoming[child_key][0])
                arc_id.append(lo + int(offset))
                arc_frame.append(t)
        frontier = upcoming
    return (np.array(node_frame, dtype=np.int64), np.array(node_state, dtype=np.int64),
            np.array(arc_src, dtype=np.int64), np.array(arc_dst, dtype=np.int64),
            np.array(arc_id, dtype=np.int64), np.array(arc_frame, dtype=np.int64))


def generate_lattice(graph: WeightedGraph, scores: FrameScores, beam: float,
                     max_nodes: int = DEFAULT_MAX_LATTICE_NODES) -> Lattice:
    """
    Path-exact beam lattice.

    The lattice accepts exactly the complete paths scoring within ``beam`` of
    the best path. Each arc carries a reduced cost, the drop in best
    completion score it causes; along a complete path these sum to
    ``best - score``. Nodes are (frame, state, slack used). A node whose
    remaining slack covers every completion from its state is merged into one
    shared (frame, state) node, so ``beam=np.inf`` yields the unrolled graph.

    If more than ``max_nodes`` slack-tracked nodes are needed, the beam is
    halved until the lattice fits; ``Lattice.beam`` records the beam used.

    Args:
        graph (WeightedGraph): Decoding graph
        scores (FrameScores): frames x pdf_count log-scores
        beam (float): Log-score width, > 0 (``np.inf`` keeps every complete path)
        max_nodes (int): Limit on slack-tracked nodes

    Returns:
        Lattice: Acyclic lattice whose path set is {paths : best - score <= beam}
    """
    if not beam > 0:
        raise InvalidArgumentError(f"beam must be > 0, got {beam}")
    scores = _check_scores(graph, scores)
    frames = scores.shape[0]
    emit = scores[:, graph.pdf]
    gamma = _viterbi_backward(graph, emit)
    if not np.isfinite(gamma[0, graph.start]):
        raise InfeasibleGraphError(f"No complete path of {frames} frames")
    # slack a node needs before every completion from it fits in the beam
    spread = gamma - _worst_backward(graph, emit, gamma)

    requested = beam
    while True:
        try:
            node_frame, node_state, src, dst, arcs, frame = _expand_lattice(graph, emit, gamma, spread,
                                                                            beam, max_nodes)
            break
        except _LatticeTooLarge:
            beam = beam / 2.0
            if beam <= BEAM_TOLERANCE:
                raise InvalidArgumentError(f"max_nodes={max_nodes} is too small for {frames} frames")
            logger.warning(f"Lattice exceeded {max_nodes} nodes; narrowing beam {requested} -> {beam}")

    finals = np.where(node_frame == frames, graph.final_log_weight[node_state], -np.inf)
    return Lattice(
        num_frames=frames,
        start=0,
        node_frame=node_frame,
        node_state=node_state,
        src=src,
        dst=dst,
        pdf=graph.pdf[arcs].copy(),
        olabel=graph.olabel[arcs].copy(),
        frame=frame,
        graph_score=graph.log_weight[arcs].copy(),
        acoustic_score=emit[frame, arcs],
        final_log_weight=finals,
        pdf_count=graph.pdf_count,
        beam=float(beam),
    )


def lattice_frame_posteriors(lattice: Lattice, acoustic_scale: float = 1.0) -> PosteriorTable:
    """
    Forward-backward over the lattice's own paths.

    Args:
        lattice (Lattice): Lattice from ``generate_lattice``
        acoustic_scale (float): Multiplier on acoustic scores before normalisation

    Returns:
        PosteriorTable: frames x pdf_count posteriors, normalised over lattice paths
    """
    score = lattice.graph_score + acoustic_scale * lattice.acoustic_score
    size = lattice.num_nodes
    frames = lattice.num_frames
    bounds = np.searchsorted(lattice.frame, np.arange(frames + 1))

    alpha = np.full(size, -np.inf)
    alpha[lattice.start] = 0.0
    for t in range(frames):
        sel = slice(bounds[t], bounds[t + 1])
        reached = _segment_logsumexp(alpha[lattice.src[sel]] + score[sel], lattice.dst[sel], size)
        alpha = np.where(lattice.node_frame == t + 1, reached, alpha)

    beta = lattice.final_log_weight.copy()
    for t in reversed(range(frames)):
        sel = slice(bounds[t], bounds[t + 1])
        reached = _segment_logsumexp(beta[lattice.dst[sel]] + score[sel], lattice.src[sel], size)
        beta = np.where(lattice.node_frame == t, reached, beta)

    with np.errstate(divide="ignore"):
        total = float(logsumexp(alpha + lattice.final_log_weight))
    if not np.isfinite(total):
        raise InfeasibleGraphError("Lattice has no complete path")
    arc_post = np.exp(alpha[lattice.src] + score + beta[lattice.dst] - total)
    flat = lattice.frame * lattice.pdf_count + lattice.pdf
    return np.bincount(flat, weights=arc_post, minlength=frames * lattice.pdf_count).reshape(
        frames, lattice.pdf_count)
