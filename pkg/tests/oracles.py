"""Slow, obviously-correct reference implementations used by the tests."""
import itertools
from functools import lru_cache
from typing import Callable, List, Sequence, Tuple

import numpy as np
from scipy.special import logsumexp

from models.domain import Lattice, WeightedGraph


def enumerate_graph_paths(graph: WeightedGraph, frames: int) -> List[Tuple[Tuple[int, ...], float]]:
    """Every complete path of ``frames`` arcs as (arc indices, graph log weight incl. final)."""
    out = {}
    for arc in range(graph.num_arcs):
        out.setdefault(int(graph.src[arc]), []).append(arc)
    paths = []

    def walk(state, arcs, weight):
        if len(arcs) == frames:
            if np.isfinite(graph.final_log_weight[state]):
                paths.append((tuple(arcs), weight + graph.final_log_weight[state]))
            return
        for arc in out.get(state, []):
            walk(int(graph.dst[arc]), arcs + [arc], weight + graph.log_weight[arc])

    walk(graph.start, [], 0.0)
    return paths


def path_score(graph: WeightedGraph, arcs: Sequence[int], weight: float, scores: np.ndarray) -> float:
    return weight + float(sum(scores[t, graph.pdf[a]] for t, a in enumerate(arcs)))


def brute_force_total(graph: WeightedGraph, scores: np.ndarray) -> float:
    paths = enumerate_graph_paths(graph, scores.shape[0])
    return float(logsumexp([path_score(graph, arcs, w, scores) for arcs, w in paths]))


def brute_force_occupancies(graph: WeightedGraph, scores: np.ndarray) -> np.ndarray:
    paths = enumerate_graph_paths(graph, scores.shape[0])
    totals = np.array([path_score(graph, arcs, w, scores) for arcs, w in paths])
    probs = np.exp(totals - logsumexp(totals))
    occ = np.zeros_like(scores)
    for (arcs, _), p in zip(paths, probs):
        for t, a in enumerate(arcs):
            occ[t, graph.pdf[a]] += p
    return occ


def enumerate_lattice_paths(lattice: Lattice, acoustic_scale: float = 1.0) -> List[Tuple[Tuple[int, ...], float]]:
    """Every complete lattice path as (graph state sequence, score)."""
    out = {}
    for arc in range(lattice.num_arcs):
        out.setdefault(int(lattice.src[arc]), []).append(arc)
    paths = []

    def walk(node, states, arcs, score):
        if lattice.node_frame[node] == lattice.num_frames:
            if np.isfinite(lattice.final_log_weight[node]):
                paths.append((tuple(states), tuple(arcs), score + lattice.final_log_weight[node]))
            return
        for arc in out.get(node, []):
            dst = int(lattice.dst[arc])
            walk(dst, states + [int(lattice.node_state[dst])], arcs + [arc],
                 score + lattice.graph_score[arc] + acoustic_scale * lattice.acoustic_score[arc])

    walk(lattice.start, [], [], 0.0)
    return [(states, score) for states, _, score in paths]


def lattice_path_arcs(lattice: Lattice) -> List[Tuple[int, ...]]:
    out = {}
    for arc in range(lattice.num_arcs):
        out.setdefault(int(lattice.src[arc]), []).append(arc)
    found = []

    def walk(node, arcs):
        if lattice.node_frame[node] == lattice.num_frames:
            if np.isfinite(lattice.final_log_weight[node]):
                found.append(tuple(arcs))
            return
        for arc in out.get(node, []):
            walk(int(lattice.dst[arc]), arcs + [arc])

    walk(lattice.start, [])
    return found


def compositions(total: int, parts: int):
    """Ordered ways to write ``total`` as ``parts`` positive integers."""
    for cuts in itertools.combinations(range(1, total), parts - 1):
        bounds = (0, *cuts, total)
        yield tuple(bounds[i + 1] - bounds[i] for i in range(parts))


def central_difference(f: Callable[[], float], array: np.ndarray, index, eps: float = 1e-6) -> float:
    """d f / d array[index] by central differences, restoring the entry afterwards."""
    original = array[index]
    array[index] = original + eps
    plus = f()
    array[index] = original - eps
    minus = f()
    array[index] = original
    return (plus - minus) / (2.0 * eps)


def relative_error(a: float, b: float, floor: float = 1e-8) -> float:
    return abs(a - b) / max(abs(a), abs(b), floor)


def edit_distance(ref: Sequence[str], hyp: Sequence[str]) -> int:
    @lru_cache(maxsize=None)
    def d(i, j):
        if i == 0:
            return j
        if j == 0:
            return i
        return min(d(i - 1, j) + 1, d(i, j - 1) + 1, d(i - 1, j - 1) + (ref[i - 1] != hyp[j - 1]))

    return d(len(ref), len(hyp))


def random_graph(rng: np.random.Generator, pdf_count: int = 4) -> WeightedGraph:
    """Small random epsilon-free graph: 2-5 states, 1-3 arcs per state, start never re-entered."""
    num_states = int(rng.integers(2, 6))
    triples = set()
    for state in range(num_states):
        for _ in range(int(rng.integers(1, 4))):
            triples.add((state, int(rng.integers(1, num_states)), int(rng.integers(0, pdf_count))))
    arcs = sorted(triples)
    finals = np.full(num_states, -np.inf)
    chosen = rng.choice(np.arange(1, num_states), size=int(rng.integers(1, num_states)), replace=False)
    finals[chosen] = rng.normal(size=len(chosen))
    return WeightedGraph(
        num_states=num_states,
        start=0,
        src=[a[0] for a in arcs],
        dst=[a[1] for a in arcs],
        pdf=[a[2] for a in arcs],
        olabel=rng.integers(-1, 3, size=len(arcs)),
        log_weight=rng.normal(size=len(arcs)),
        final_log_weight=finals,
        pdf_count=pdf_count,
    )


def random_instance(seed: int) -> Tuple[WeightedGraph, np.ndarray]:
    """A random graph with N(0, 2^2) scores of 1-5 frames that has at least one complete path."""
    rng = np.random.default_rng(seed)
    while True:
        graph = random_graph(rng)
        scores = rng.normal(scale=2.0, size=(int(rng.integers(1, 6)), graph.pdf_count))
        if enumerate_graph_paths(graph, scores.shape[0]):
            return graph, scores


def graph_path_table(graph: WeightedGraph, scores: np.ndarray) -> List[Tuple[tuple, float]]:
    """Every complete path keyed by its (states, pdfs, output labels), sorted by key."""
    table = []
    for arcs, weight in enumerate_graph_paths(graph, scores.shape[0]):
        key = (tuple(int(graph.dst[a]) for a in arcs), tuple(int(graph.pdf[a]) for a in arcs),
               tuple(int(graph.olabel[a]) for a in arcs))
        table.append((key, path_score(graph, arcs, weight, scores)))
    return sorted(table)


def within_beam(table: List[Tuple[tuple, float]], beam: float) -> List[Tuple[tuple, float]]:
    best = max(score for _, score in table)
    return [(key, score) for key, score in table if best - score <= beam]


def lattice_path_table(lattice: Lattice, acoustic_scale: float = 1.0) -> List[Tuple[tuple, float]]:
    """Every complete lattice path keyed like ``graph_path_table``, sorted by key."""
    table = []
    for arcs in lattice_path_arcs(lattice):
        key = (tuple(int(lattice.node_state[lattice.dst[a]]) for a in arcs),
               tuple(int(lattice.pdf[a]) for a in arcs), tuple(int(lattice.olabel[a]) for a in arcs))
        score = sum(lattice.graph_score[a] + acoustic_scale * lattice.acoustic_score[a] for a in arcs)
        table.append((key, float(score + lattice.final_log_weight[lattice.dst[arcs[-1]]])))
    return sorted(table)


def table_occupancies(table: List[Tuple[tuple, float]], frames: int, pdf_count: int) -> np.ndarray:
    """Per-frame pdf posteriors of a path table normalised over its own paths."""
    totals = np.array([score for _, score in table])
    probs = np.exp(totals - logsumexp(totals))
    occ = np.zeros((frames, pdf_count))
    for ((_, pdfs, _), _), p in zip(table, probs):
        occ[np.arange(frames), list(pdfs)] += p
    return occ
