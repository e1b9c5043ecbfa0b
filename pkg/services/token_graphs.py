import math
from collections import defaultdict, deque
from dataclasses import dataclass, field
from typing import Dict, Iterable, List, Optional, Sequence, Tuple

import numpy as np

from core.errors import InfeasibleSupervisionError, InvalidArgumentError
from core.logging import logger
from models.domain import (
    BOS,
    NO_LABEL,
    GraphSet,
    HmmTopology,
    TokenInventory,
    TokenNgramLm,
    WeightedGraph,
)

DEFAULT_DISCOUNT = 0.5


def build_hmm_topology(states_per_unit: int) -> HmmTopology:
    """
    Build the flat-start left-to-right HMM used for every token.

    Each state has a self-loop and a forward arc (the last state's forward arc
    is the exit), with the fixed probability 1/k over its k outgoing arcs.

    Args:
        states_per_unit (int): Number of emitting states per token

    Returns:
        HmmTopology: The topology

    Raises:
        InvalidArgumentError: states_per_unit < 1
    """
    if int(states_per_unit) != states_per_unit or states_per_unit < 1:
        raise InvalidArgumentError(f"states_per_unit must be >= 1, got {states_per_unit}")
    transitions = []
    for state in range(states_per_unit):
        outgoing = [state, state + 1]
        for dst in outgoing:
            transitions.append((state, dst, 1.0 / len(outgoing)))
    return HmmTopology(states_per_unit=int(states_per_unit), transitions=tuple(transitions))


def min_unit_frames(topology: HmmTopology) -> int:
    """Fewest frames needed to traverse one unit from entry to exit."""
    dist = {0: 1}
    queue = deque([0])
    while queue:
        state = queue.popleft()
        for dst, _ in topology.outgoing(state):
            if dst == topology.exit_state:
                return dist[state]
            if dst not in dist:
                dist[dst] = dist[state] + 1
                queue.append(dst)
    raise InvalidArgumentError("Topology has no exit")


def estimate_token_ngram(corpus_labels: Sequence[Sequence[str]], order: int,
                         vocab: Optional[Sequence[str]] = None,
                         discount: float = DEFAULT_DISCOUNT) -> TokenNgramLm:
    """
    Estimate an absolute-discount backoff n-gram over tokens.

    Seen events of a history get (c - d) / c(h); the freed mass goes to the
    unseen events in proportion to the next-lower order. A history whose
    events are all seen is left undiscounted. Unigrams back off to uniform.
    The result is expanded over every history reachable from ``<s>``.

    Args:
        corpus_labels: Token sequences (reference transcripts)
        order (int): n
        vocab: Predicted tokens; defaults to tokens of the corpus in first-seen order
        discount (float): d in [0, 1)

    Returns:
        TokenNgramLm: Normalised, backoff-expanded model
    """
    if int(order) != order or order < 1:
        raise InvalidArgumentError(f"n-gram order must be >= 1, got {order}")
    if not corpus_labels:
        raise InvalidArgumentError("Cannot estimate an n-gram from an empty corpus")
    if not 0.0 <= discount < 1.0:
        raise InvalidArgumentError(f"discount must be in [0, 1), got {discount}")

    if vocab is None:
        vocab = list(dict.fromkeys(tok for seq in corpus_labels for tok in seq))
    vocab = tuple(vocab)
    index = {tok: i for i, tok in enumerate(vocab)}
    size = len(vocab)

    counts: List[Dict[Tuple[str, ...], np.ndarray]] = [defaultdict(lambda: np.zeros(size)) for _ in range(order)]
    for seq in corpus_labels:
        padded = (BOS,) * (order - 1) + tuple(seq)
        for i in range(order - 1, len(padded)):
            token = padded[i]
            if token not in index:
                raise InvalidArgumentError(f"Token {token!r} not in LM vocabulary")
            for k in range(order):
                counts[k][padded[i - k:i]][index[token]] += 1.0

    memo: Dict[Tuple[str, ...], np.ndarray] = {}

    def prob(history: Tuple[str, ...]) -> np.ndarray:
        if history in memo:
            return memo[history]
        lower = np.full(size, 1.0 / size) if not history else prob(history[1:])
        c = counts[len(history)].get(history)
        if c is None or c.sum() == 0.0:
            p = lower
        else:
            total = c.sum()
            seen = c > 0
            if seen.all() or discount == 0.0:
                p = c / total
            else:
                p = np.where(seen, (c - discount) / total, 0.0)
                freed = discount * seen.sum() / total
                unseen_lower = np.where(seen, 0.0, lower)
                p = p + freed * unseen_lower / unseen_lower.sum()
        memo[history] = p
        return p

    table: Dict[Tuple[str, ...], np.ndarray] = {}
    initial = (BOS,) * (order - 1)
    queue = deque([initial])
    seen_histories = {initial}
    while queue:
        history = queue.popleft()
        with np.errstate(divide="ignore"):
            table[history] = np.log(prob(history))
        if order == 1:
            continue
        for tok in vocab:
            nxt = (history + (tok,))[-(order - 1):]
            if nxt not in seen_histories:
                seen_histories.add(nxt)
                queue.append(nxt)

    logger.info(f"Estimated {order}-gram token LM: {len(vocab)} tokens, {len(table)} histories")
    return TokenNgramLm(order=int(order), vocab=vocab, table=table, discount=discount)


@dataclass
class _TokenAcceptor:
    """Small token-level acceptor compiled into an HMM-state graph."""

    start: int = 0
    src: List[int] = field(default_factory=list)
    dst: List[int] = field(default_factory=list)
    token: List[int] = field(default_factory=list)
    weight: List[float] = field(default_factory=list)
    finals: Dict[int, float] = field(default_factory=dict)

    def add_arc(self, src: int, dst: int, token: int, weight: float):
        self.src.append(src)
        self.dst.append(dst)
        self.token.append(token)
        self.weight.append(weight)

    def leaving(self) -> Dict[int, List[int]]:
        out: Dict[int, List[int]] = defaultdict(list)
        for arc, src in enumerate(self.src):
            out[src].append(arc)
        return out


def _lm_acceptor(lm: TokenNgramLm, inventory: TokenInventory, lm_weight: float = 1.0) -> _TokenAcceptor:
    acceptor = _TokenAcceptor()
    state_of = {lm.initial_history: 0}
    order = [lm.initial_history]
    queue = deque([lm.initial_history])
    while queue:
        history = queue.popleft()
        for tok in inventory.tokens:
            if tok not in lm.vocab:
                continue
            logprob = lm.logprob(history, tok)
            if not math.isfinite(logprob):
                continue
            nxt = lm.next_history(history, tok)
            if nxt not in state_of:
                state_of[nxt] = len(order)
                order.append(nxt)
                queue.append(nxt)
            acceptor.add_arc(state_of[history], state_of[nxt], inventory.index(tok), lm_weight * logprob)
    acceptor.finals = {state: 0.0 for state in range(len(order))}
    return acceptor


def _label_acceptor(labels: Sequence[str], inventory: TokenInventory,
                    lm: Optional[TokenNgramLm]) -> _TokenAcceptor:
    """Label chain with optional boundary silence, weighted by the LM when given."""
    sil = inventory.silence_token
    n = len(labels)
    chain = _TokenAcceptor()
    # node i = i labels consumed; n + 1 = after leading silence; n + 2 = after trailing silence
    if labels[0] != sil:
        chain.add_arc(0, n + 1, inventory.silence_index, 0.0)
        chain.add_arc(n + 1, 1, inventory.index(labels[0]), 0.0)
    chain.add_arc(0, 1, inventory.index(labels[0]), 0.0)
    for i in range(1, n):
        chain.add_arc(i, i + 1, inventory.index(labels[i]), 0.0)
    chain.finals = {n: 0.0}
    if labels[-1] != sil:
        chain.add_arc(n, n + 2, inventory.silence_index, 0.0)
        chain.finals[n + 2] = 0.0
    if lm is None:
        return chain

    # intersect with the LM so numerator paths carry their denominator weights
    out = chain.leaving()
    acceptor = _TokenAcceptor()
    initial = (0, lm.initial_history)
    state_of = {initial: 0}
    queue = deque([initial])
    while queue:
        key = queue.popleft()
        node, history = key
        for arc in out[node]:
            tok = inventory.tokens[chain.token[arc]]
            logprob = lm.logprob(history, tok)
            if not math.isfinite(logprob):
                continue
            nxt = (chain.dst[arc], lm.next_history(history, tok))
            if nxt not in state_of:
                state_of[nxt] = len(state_of)
                queue.append(nxt)
            acceptor.add_arc(state_of[key], state_of[nxt], chain.token[arc], logprob)
    acceptor.finals = {sid: chain.finals[node] for (node, _), sid in state_of.items() if node in chain.finals}
    return acceptor


def _compile(acceptor: _TokenAcceptor, topology: HmmTopology, inventory: TokenInventory,
             with_olabels: bool) -> WeightedGraph:
    """Expand every token arc into its HMM; graph states are (context, token arc, HMM state)."""
    n_states = topology.states_per_unit
    bicontext = inventory.context_mode == "left-bicontext"
    leaving = acceptor.leaving()
    log_out = {state: [(dst, math.log(prob)) for dst, prob in topology.outgoing(state)]
               for state in range(n_states)}

    ids: Dict[tuple, int] = {}
    keys: List[Optional[tuple]] = [None]
    arcs: List[Tuple[int, int, int, int, float]] = []
    finals: Dict[int, float] = {}
    queue = deque()

    def state_id(key: tuple) -> int:
        if key not in ids:
            ids[key] = len(keys)
            keys.append(key)
            queue.append(key)
        return ids[key]

    def enter(src: int, context: int, arc: int, weight: float):
        tok = acceptor.token[arc]
        dst = state_id((context, arc, 0))
        arcs.append((src, dst, inventory.pdf_id(context, tok, 0, n_states),
                     tok if with_olabels else NO_LABEL, weight + acceptor.weight[arc]))

    start_context = inventory.silence_index if bicontext else 0
    for arc in leaving[acceptor.start]:
        enter(0, start_context, arc, 0.0)

    while queue:
        key = queue.popleft()
        context, arc, hmm_state = key
        sid = ids[key]
        tok = acceptor.token[arc]
        for dst, log_prob in log_out[hmm_state]:
            if dst == topology.exit_state:
                next_context = tok if bicontext else 0
                after = acceptor.dst[arc]
                for nxt in leaving[after]:
                    enter(sid, next_context, nxt, log_prob)
                if after in acceptor.finals:
                    finals[sid] = log_prob + acceptor.finals[after]
            else:
                arcs.append((sid, state_id((context, arc, dst)),
                             inventory.pdf_id(context, tok, dst, n_states), NO_LABEL, log_prob))

    return _trim(len(keys), arcs, finals, inventory.pdf_count(n_states))


def _trim(num_states: int, arcs: List[Tuple[int, int, int, int, float]],
          finals: Dict[int, float], pdf_count: int) -> WeightedGraph:
    """Drop states that cannot reach a final state, keeping relative order."""
    incoming: Dict[int, List[int]] = defaultdict(list)
    for src, dst, *_ in arcs:
        incoming[dst].append(src)
    alive = set(finals)
    stack = list(finals)
    while stack:
        state = stack.pop()
        for src in incoming[state]:
            if src not in alive:
                alive.add(src)
                stack.append(src)
    alive.add(0)
    remap = {old: new for new, old in enumerate(sorted(alive))}
    kept = sorted(((remap[s], remap[d], p, o, w) for s, d, p, o, w in arcs if s in alive and d in alive),
                  key=lambda a: a[0])
    final_weights = np.full(len(remap), -np.inf)
    for state, weight in finals.items():
        final_weights[remap[state]] = weight
    if kept:
        src, dst, pdf, olabel, weight = (list(col) for col in zip(*kept))
    else:
        src = dst = pdf = olabel = weight = []
    return WeightedGraph(num_states=len(remap), start=0, src=src, dst=dst, pdf=pdf, olabel=olabel,
                         log_weight=weight, final_log_weight=final_weights, pdf_count=pdf_count)


def build_numerator_graph(labels: Sequence[str], topology: HmmTopology, inventory: TokenInventory,
                          frames: int, lm: Optional[TokenNgramLm] = None) -> WeightedGraph:
    """
    Compile the supervision graph of one utterance.

    Accepts the HMM state sequences realising ``labels`` in order, with an
    optional silence unit before and after (skipped when the labels already
    start/end with silence).

    Args:
        labels: Reference or hypothesis tokens
        topology (HmmTopology): Per-token HMM
        inventory (TokenInventory): Token inventory
        frames (int): Utterance length the graph will be evaluated at
        lm: When given, paths also carry the LM weights of their token sequence

    Returns:
        WeightedGraph: Numerator graph

    Raises:
        InfeasibleSupervisionError: frames below the minimum path length
    """
    if not labels:
        raise InvalidArgumentError("Numerator labels must be non-empty")
    minimum = len(labels) * min_unit_frames(topology)
    if frames < minimum:
        raise InfeasibleSupervisionError(
            f"{frames} frames cannot realise {len(labels)} tokens (need >= {minimum})")
    return _compile(_label_acceptor(list(labels), inventory, lm), topology, inventory, with_olabels=True)


def build_denominator_graph(lm: TokenNgramLm, topology: HmmTopology, inventory: TokenInventory) -> WeightedGraph:
    """Compose the expanded LM acceptor with the per-token HMMs."""
    graph = _compile(_lm_acceptor(lm, inventory), topology, inventory, with_olabels=False)
    logger.info(f"Denominator graph: {graph.num_states} states, {graph.num_arcs} arcs, {graph.pdf_count} pdfs")
    return graph


def build_decoding_graph(lm: TokenNgramLm, topology: HmmTopology, inventory: TokenInventory,
                         lm_weight: float = 1.0) -> WeightedGraph:
    """Denominator structure with token output labels on unit-entry arcs."""
    graph = _compile(_lm_acceptor(lm, inventory, lm_weight), topology, inventory, with_olabels=True)
    logger.info(f"Decoding graph: {graph.num_states} states, {graph.num_arcs} arcs (lm_weight={lm_weight})")
    return graph


def build_graph_set(inventory: TokenInventory, topology: HmmTopology, lm: TokenNgramLm,
                    lm_weight: float = 1.0) -> GraphSet:
    return GraphSet(
        inventory=inventory,
        topology=topology,
        lm=lm,
        den=build_denominator_graph(lm, topology, inventory),
        decode=build_decoding_graph(lm, topology, inventory, lm_weight),
    )


def strip_silence(tokens: Iterable[str], inventory: TokenInventory) -> Tuple[str, ...]:
    return tuple(tok for tok in tokens if tok != inventory.silence_token)
