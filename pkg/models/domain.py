import hashlib
from dataclasses import dataclass, field, replace
from typing import Dict, List, Literal, Mapping, Optional, Sequence, Tuple

import numpy as np

from core.errors import InvalidArgumentError

EPSILON = -1
NO_LABEL = -1
BOS = "<s>"

ContextMode = Literal["mono", "left-bicontext"]

# frames x pdf_count matrices; aliases document intent at call sites
FrameScores = np.ndarray
PosteriorTable = np.ndarray


def _frozen(array, dtype) -> np.ndarray:
    out = np.ascontiguousarray(np.array(array, dtype=dtype))
    out.setflags(write=False)
    return out


@dataclass(frozen=True)
class TokenInventory:
    tokens: Tuple[str, ...]
    silence_token: str
    context_mode: ContextMode = "mono"

    def __post_init__(self):
        object.__setattr__(self, "tokens", tuple(self.tokens))
        if len(self.tokens) < 2:
            raise InvalidArgumentError("Token inventory needs at least 2 tokens")
        if len(set(self.tokens)) != len(self.tokens):
            raise InvalidArgumentError("Token ids must be unique")
        if self.silence_token not in self.tokens:
            raise InvalidArgumentError(f"Silence token {self.silence_token!r} not in inventory")
        if self.context_mode not in ("mono", "left-bicontext"):
            raise InvalidArgumentError(f"Unknown context mode: {self.context_mode}")

    @property
    def size(self) -> int:
        return len(self.tokens)

    @property
    def silence_index(self) -> int:
        return self.tokens.index(self.silence_token)

    @property
    def num_contexts(self) -> int:
        return self.size if self.context_mode == "left-bicontext" else 1

    def index(self, token: str) -> int:
        try:
            return self.tokens.index(token)
        except ValueError:
            raise InvalidArgumentError(f"Token {token!r} not in inventory") from None

    def pdf_count(self, states_per_unit: int) -> int:
        return self.num_contexts * self.size * states_per_unit

    def pdf_id(self, left_context: int, token: int, state: int, states_per_unit: int) -> int:
        ctx = left_context if self.context_mode == "left-bicontext" else 0
        return (ctx * self.size + token) * states_per_unit + state


@dataclass(frozen=True)
class HmmTopology:
    """Per-unit HMM. Entry is always state 0; ``to == states_per_unit`` is the exit."""

    states_per_unit: int
    transitions: Tuple[Tuple[int, int, float], ...]

    def __post_init__(self):
        object.__setattr__(self, "transitions", tuple(tuple(t) for t in self.transitions))
        n = self.states_per_unit
        if n < 1:
            raise InvalidArgumentError("HMM topology needs at least one state")
        for state in range(n):
            total = sum(prob for src, _, prob in self.transitions if src == state)
            if abs(total - 1.0) > 1e-12:
                raise InvalidArgumentError(f"Outgoing probabilities of state {state} sum to {total}")
        for src, dst, prob in self.transitions:
            if not (0 <= src < n and 0 <= dst <= n) or not 0.0 < prob <= 1.0:
                raise InvalidArgumentError(f"Bad transition {(src, dst, prob)}")
        forward = {0}
        frontier = [0]
        while frontier:
            state = frontier.pop()
            for dst, _ in self.outgoing(state):
                if dst < n and dst not in forward:
                    forward.add(dst)
                    frontier.append(dst)
        backward = {n}
        changed = True
        while changed:
            changed = False
            for src, dst, _ in self.transitions:
                if dst in backward and src not in backward:
                    backward.add(src)
                    changed = True
        if len(forward) != n or not set(range(n)) <= backward:
            raise InvalidArgumentError("Every HMM state must lie on an entry-to-exit path")

    @property
    def exit_state(self) -> int:
        return self.states_per_unit

    def outgoing(self, state: int) -> List[Tuple[int, float]]:
        return [(dst, prob) for src, dst, prob in self.transitions if src == state]


@dataclass(frozen=True, eq=False)
class WeightedGraph:
    """Epsilon-free weighted graph; every arc consumes one frame.

    Arcs are stored sorted by source state in contiguous arrays. State
    ``start`` is non-emitting; ``final_log_weight`` is -inf for non-final
    states.
    """

    num_states: int
    start: int
    src: np.ndarray
    dst: np.ndarray
    pdf: np.ndarray
    olabel: np.ndarray
    log_weight: np.ndarray
    final_log_weight: np.ndarray
    pdf_count: int

    def __post_init__(self):
        for name, dtype in (("src", np.int64), ("dst", np.int64), ("pdf", np.int64),
                            ("olabel", np.int64), ("log_weight", np.float64),
                            ("final_log_weight", np.float64)):
            object.__setattr__(self, name, _frozen(getattr(self, name), dtype))
        n = len(self.src)
        if not (len(self.dst) == len(self.pdf) == len(self.olabel) == len(self.log_weight) == n):
            raise InvalidArgumentError("Arc arrays must have equal length")
        if len(self.final_log_weight) != self.num_states:
            raise InvalidArgumentError("final_log_weight must have one entry per state")
        if n and (self.pdf.max() >= self.pdf_count or self.pdf.min() < EPSILON):
            raise InvalidArgumentError("pdf id out of range")
        if n and np.any(np.diff(self.src) < 0):
            raise InvalidArgumentError("Arcs must be sorted by source state")

    @property
    def num_arcs(self) -> int:
        return len(self.src)

    @property
    def finals(self) -> np.ndarray:
        return np.flatnonzero(np.isfinite(self.final_log_weight))


@dataclass(frozen=True, eq=False)
class TokenNgramLm:
    """Backoff-expanded n-gram over a token vocabulary.

    ``table`` maps every reachable history (length ``order - 1``, padded with
    ``<s>``) to a vector of natural-log probabilities aligned with ``vocab``.
    """

    order: int
    vocab: Tuple[str, ...]
    table: Mapping[Tuple[str, ...], np.ndarray]
    discount: float = 0.5

    @property
    def initial_history(self) -> Tuple[str, ...]:
        return (BOS,) * (self.order - 1)

    def next_history(self, history: Tuple[str, ...], token: str) -> Tuple[str, ...]:
        if self.order == 1:
            return ()
        return (history + (token,))[-(self.order - 1):]

    def logprob(self, history: Tuple[str, ...], token: str) -> float:
        return float(self.table[tuple(history)][self.vocab.index(token)])

    def histories(self) -> List[Tuple[str, ...]]:
        return sorted(self.table)


@dataclass(frozen=True, eq=False)
class Lattice:
    """Acyclic lattice; every node sits at one frame and maps to one graph state.

    Arc ``i`` spans frame ``frame[i]`` (one frame, ``frame[i]`` to
    ``frame[i] + 1``) and carries separate graph and acoustic scores.
    """

    num_frames: int
    start: int
    node_frame: np.ndarray
    node_state: np.ndarray
    src: np.ndarray
    dst: np.ndarray
    pdf: np.ndarray
    olabel: np.ndarray
    frame: np.ndarray
    graph_score: np.ndarray
    acoustic_score: np.ndarray
    final_log_weight: np.ndarray
    pdf_count: int
    beam: float = float("inf")

    @property
    def num_nodes(self) -> int:
        return len(self.node_frame)

    @property
    def num_arcs(self) -> int:
        return len(self.src)


@dataclass(frozen=True)
class BestPath:
    arcs: Tuple[int, ...]
    states: Tuple[int, ...]
    pdfs: Tuple[int, ...]
    tokens: Tuple[int, ...]
    score: float


@dataclass(frozen=True, eq=False)
class Utterance:
    id: str
    speaker_id: str
    features: np.ndarray
    labels: Tuple[str, ...]
    confidence: Optional[float] = None

    @property
    def num_frames(self) -> int:
        return int(self.features.shape[0])

    def with_labels(self, labels: Sequence[str], confidence: Optional[float] = None) -> "Utterance":
        return replace(self, labels=tuple(labels), confidence=confidence)


@dataclass(frozen=True, eq=False)
class SpeakerProfile:
    speaker_id: str
    scale: np.ndarray
    offset: np.ndarray
    noise_level: float


@dataclass(frozen=True, eq=False)
class SilenceModel:
    mean: np.ndarray
    std: np.ndarray


@dataclass(frozen=True, eq=False)
class Corpus:
    inventory: TokenInventory
    utterances: Tuple[Utterance, ...]
    speakers: Mapping[str, SpeakerProfile]
    silence: SilenceModel
    name: str = "corpus"

    def by_speaker(self) -> Dict[str, List[Utterance]]:
        grouped: Dict[str, List[Utterance]] = {}
        for utt in self.utterances:
            grouped.setdefault(utt.speaker_id, []).append(utt)
        return {spk: grouped[spk] for spk in sorted(grouped)}

    @property
    def feature_dim(self) -> int:
        return int(self.silence.mean.shape[0])


@dataclass(eq=False)
class AcousticNet:
    """Parameter container for the feed-forward acoustic model.

    Parameter names: ``hidden.{l}.weight`` (in x out), ``hidden.{l}.bias``,
    ``lfmmi.weight``, ``lfmmi.bias``, ``ce.weight``, ``ce.bias``.
    """

    input_dim: int
    widths: Tuple[int, ...]
    pdf_count: int
    params: Dict[str, np.ndarray] = field(default_factory=dict)

    @property
    def num_hidden(self) -> int:
        return len(self.widths)

    def copy(self) -> "AcousticNet":
        return AcousticNet(self.input_dim, tuple(self.widths), self.pdf_count,
                           {name: value.copy() for name, value in self.params.items()})

    def with_params(self, params: Mapping[str, np.ndarray]) -> "AcousticNet":
        return AcousticNet(self.input_dim, tuple(self.widths), self.pdf_count, dict(params))

    def checksum(self) -> str:
        digest = hashlib.sha256()
        for name in self.params:
            digest.update(name.encode("utf-8"))
            digest.update(np.ascontiguousarray(self.params[name], dtype="<f8").tobytes())
        return digest.hexdigest()


@dataclass(eq=False)
class SpeakerAdapter:
    """Per-speaker LHUC parameters.

    Deterministic adapters hold ``r.{layer}``; Bayesian adapters hold
    ``mu.{layer}`` and ``log_sigma.{layer}`` of q(r) = N(mu, exp(log_sigma)^2).
    """

    speaker_id: str
    mode: Literal["deterministic", "bayesian"]
    params: Dict[str, np.ndarray]

    @classmethod
    def identity(cls, speaker_id: str, widths: Mapping[int, int],
                 mode: str = "deterministic", init_log_sigma: float = 0.0) -> "SpeakerAdapter":
        params: Dict[str, np.ndarray] = {}
        for layer in sorted(widths):
            if mode == "deterministic":
                params[f"r.{layer}"] = np.zeros(widths[layer])
            elif mode == "bayesian":
                params[f"mu.{layer}"] = np.zeros(widths[layer])
                params[f"log_sigma.{layer}"] = np.full(widths[layer], float(init_log_sigma))
            else:
                raise InvalidArgumentError(f"Unknown adapter mode: {mode}")
        return cls(speaker_id, mode, params)

    @property
    def layers(self) -> Tuple[int, ...]:
        prefix = "r." if self.mode == "deterministic" else "mu."
        return tuple(sorted(int(name[len(prefix):]) for name in self.params if name.startswith(prefix)))

    def mean_r(self) -> Dict[int, np.ndarray]:
        """r used for prediction: r itself, or the posterior mean."""
        key = "r" if self.mode == "deterministic" else "mu"
        return {layer: self.params[f"{key}.{layer}"] for layer in self.layers}

    def sigma(self, layer: int) -> np.ndarray:
        return np.exp(self.params[f"log_sigma.{layer}"])

    def sample_r(self, eps: Mapping[int, np.ndarray]) -> Dict[int, np.ndarray]:
        """Reparameterised draw r = mu + sigma * eps."""
        return {layer: self.params[f"mu.{layer}"] + self.sigma(layer) * eps[layer] for layer in self.layers}

    def copy(self) -> "SpeakerAdapter":
        return SpeakerAdapter(self.speaker_id, self.mode,
                              {name: value.copy() for name, value in self.params.items()})


@dataclass(frozen=True, eq=False)
class GraphSet:
    """Everything built once per model and shared across utterances and speakers."""

    inventory: TokenInventory
    topology: HmmTopology
    lm: TokenNgramLm
    den: WeightedGraph
    decode: WeightedGraph

    @property
    def pdf_count(self) -> int:
        return self.inventory.pdf_count(self.topology.states_per_unit)
