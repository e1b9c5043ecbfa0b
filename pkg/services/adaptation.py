"""
Speaker adaptation: LHUC, Bayesian LHUC, MAP-LHUC and KL-LHUC estimation,
speaker adaptive training and the unsupervised decode-then-adapt loop.
"""
import bisect
import math
from dataclasses import dataclass
from typing import Dict, List, Mapping, Optional, Sequence, Tuple

import numpy as np
from scipy.special import log_softmax, softmax
from tqdm import tqdm

from core.config import settings
from core.errors import (
    DivergenceError,
    InfeasibleGraphError,
    InfeasibleSupervisionError,
    InvalidArgumentError,
    NonFiniteGradientError,
)
from core.logging import logger
from models.domain import (
    AcousticNet,
    BestPath,
    GraphSet,
    Lattice,
    PosteriorTable,
    SilenceModel,
    SpeakerAdapter,
    Utterance,
    WeightedGraph,
)
from models.schemas import AdaptConfig, ObjectiveConfig, PriorSpec, TrainConfig
from services.acoustic_net import backward, forward, sgd_step
from services.corpus_sim import silence_pad
from services.graph_inference import generate_lattice, lattice_frame_posteriors, viterbi_best_path
from services.objectives import utterance_objective
from services.token_graphs import build_numerator_graph
from services.training import TrainingResult, train_acoustic_model
from utils.seeding import substream

DEFAULT_BUCKET_COUNT = 40


@dataclass(frozen=True, eq=False)
class AdaptationItem:
    """One utterance ready for adaptation.

    ``ce_targets`` is set under alignment supervision; ``si_ce`` holds the
    frozen SI CE-head logits used by the KL-LHUC regulariser.
    """

    utterance: Utterance
    num_graph: WeightedGraph
    ce_targets: Optional[PosteriorTable] = None
    si_ce: Optional[np.ndarray] = None

    @property
    def num_frames(self) -> int:
        return self.utterance.num_frames


def gaussian_kl(mu, sigma, prior: PriorSpec) -> float:
    """
    Closed-form KL(N(mu, sigma^2) || N(mu0, sigma0^2)) summed over dimensions.

    Raises:
        InvalidArgumentError: any sigma <= 0
    """
    mu = np.asarray(mu, dtype=np.float64)
    sigma = np.asarray(sigma, dtype=np.float64)
    if np.any(~(sigma > 0.0)):
        raise InvalidArgumentError("Posterior sigma must be > 0")
    s0 = prior.sigma0
    return float(np.sum(np.log(s0 / sigma) + (sigma ** 2 + (mu - prior.mu0) ** 2) / (2.0 * s0 ** 2) - 0.5))


def gaussian_kl_grad(mu, log_sigma, prior: PriorSpec) -> Tuple[np.ndarray, np.ndarray]:
    """Gradients of ``gaussian_kl`` w.r.t. mu and log_sigma."""
    s0_sq = prior.sigma0 ** 2
    return (np.asarray(mu) - prior.mu0) / s0_sq, np.exp(2.0 * np.asarray(log_sigma)) / s0_sq - 1.0


def map_penalty(r, prior: PriorSpec, weight: float = 1.0) -> Tuple[float, np.ndarray]:
    """L2 pull of r towards the prior mean: weight * sum (r - mu0)^2 / (2 sigma0^2)."""
    diff = np.asarray(r, dtype=np.float64) - prior.mu0
    s0_sq = prior.sigma0 ** 2
    return float(weight * np.sum(diff ** 2) / (2.0 * s0_sq)), weight * diff / s0_sq


def kl_output_penalty(ce_adapted: np.ndarray, ce_si: np.ndarray,
                      weight: float = 1.0) -> Tuple[float, np.ndarray]:
    """
    Mean per-frame KL(softmax(si) || softmax(adapted)) between CE-head outputs.

    Args:
        ce_adapted: CE logits of the adapted model, frames x pdfs
        ce_si: Frozen CE logits of the SI model, same shape
        weight (float): lambda

    Returns:
        Tuple: weighted penalty and its gradient w.r.t. ``ce_adapted``
    """
    ce_adapted = np.asarray(ce_adapted, dtype=np.float64)
    ce_si = np.asarray(ce_si, dtype=np.float64)
    if ce_adapted.shape != ce_si.shape:
        raise InvalidArgumentError("Adapted and SI scores must have the same shape")
    frames = ce_adapted.shape[0]
    log_p = log_softmax(ce_si, axis=1)
    log_q = log_softmax(ce_adapted, axis=1)
    kl = float(np.sum(np.exp(log_p) * (log_p - log_q)))
    grad = (softmax(ce_adapted, axis=1) - np.exp(log_p)) * weight / frames
    return weight * max(kl, 0.0) / frames, grad


def confidence_score(lattice: Lattice, best_path: BestPath, acoustic_scale: float = 1.0) -> float:
    """Average lattice posterior of the best path's pdf over frames."""
    if len(best_path.pdfs) != lattice.num_frames:
        raise InvalidArgumentError("Best path and lattice cover different frame counts")
    posteriors = lattice_frame_posteriors(lattice, acoustic_scale)
    value = float(np.mean(posteriors[np.arange(lattice.num_frames), list(best_path.pdfs)]))
    return min(max(value, 0.0), 1.0)


def select_by_confidence(utterances: Sequence[Utterance], rate: float) -> List[Utterance]:
    """
    Keep the top ceil(rate * N) utterances by confidence, ties by id.

    Utterances without a confidence rank last.
    """
    if not 0.0 < rate <= 1.0:
        raise InvalidArgumentError(f"selection rate must be in (0, 1], got {rate}")
    if not utterances:
        return []
    keep = math.ceil(round(rate * len(utterances), 9))
    ranked = sorted(utterances, key=lambda u: (-(u.confidence if u.confidence is not None else -np.inf), u.id))
    return ranked[:keep]


def bucket_utterance_lengths(length: int, buckets: Sequence[int]) -> int:
    """Smallest bucket >= length."""
    if not buckets:
        raise InvalidArgumentError("Bucket table is empty")
    table = sorted(buckets)
    pos = bisect.bisect_left(table, length)
    if pos == len(table):
        raise InvalidArgumentError(f"Length {length} exceeds the largest bucket {table[-1]}")
    return int(table[pos])


def default_buckets(lengths: Sequence[int], count: int = DEFAULT_BUCKET_COUNT) -> List[int]:
    """Geometrically spaced lengths between the shortest and longest utterance."""
    if not lengths:
        raise InvalidArgumentError("Cannot build buckets from no lengths")
    low, high = int(min(lengths)), int(max(lengths))
    points = np.ceil(np.geomspace(low, high, num=max(count, 1))).astype(int)
    return sorted(set(points.tolist()) | {low, high})


def _hooked_widths(net: AcousticNet, layers: Optional[Sequence[int]]) -> Dict[int, int]:
    layers = list(range(net.num_hidden)) if layers is None else list(layers)
    for layer in layers:
        if not 0 <= layer < net.num_hidden:
            raise InvalidArgumentError(f"Hooked layer {layer} outside 0..{net.num_hidden - 1}")
    return {layer: net.widths[layer] for layer in sorted(set(layers))}


def _item_loss_and_grads(net: AcousticNet, den_graph: WeightedGraph, item: AdaptationItem,
                         r_by_layer: Mapping[int, np.ndarray], objective: ObjectiveConfig,
                         cfg: AdaptConfig) -> Tuple[float, Dict[int, np.ndarray]]:
    lfmmi, ce, tape = forward(net, item.utterance.features, r_by_layer)
    breakdown, grad_lfmmi, grad_ce = utterance_objective(
        objective, item.num_graph, den_graph, lfmmi, ce, item.ce_targets)
    loss = breakdown.total
    if cfg.regularizer == "kl_output":
        penalty, penalty_grad = kl_output_penalty(ce, item.si_ce, cfg.kl_weight)
        loss += penalty
        grad_ce = grad_ce + penalty_grad
    return loss, backward(tape, grad_lfmmi, grad_ce, wrt=("lhuc",)).lhuc


def _effective_objective(cfg: AdaptConfig) -> ObjectiveConfig:
    if cfg.supervision == "alignment":
        # frozen alignments replace sequence supervision
        return ObjectiveConfig(gamma1=0.0, gamma2=cfg.objective.gamma2 or 0.1, gamma3=cfg.objective.gamma3)
    return cfg.objective


def _apply_update(adapter: SpeakerAdapter, grads: Dict[str, np.ndarray], learning_rate: float,
                  loss: float, where: str) -> SpeakerAdapter:
    if not math.isfinite(loss):
        logger.error(f"Adaptation diverged for {adapter.speaker_id} at {where}: loss={loss}")
        raise DivergenceError(f"Non-finite adaptation loss for speaker {adapter.speaker_id} at {where}",
                              adapter.copy())
    try:
        params = sgd_step(adapter.params, grads, learning_rate)
    except NonFiniteGradientError as e:
        raise DivergenceError(f"Non-finite adapter gradient for speaker {adapter.speaker_id} at {where}",
                              adapter.copy()) from e
    return SpeakerAdapter(adapter.speaker_id, adapter.mode, params)


def _bayesian_step(net: AcousticNet, den_graph: WeightedGraph, item: AdaptationItem, adapter: SpeakerAdapter,
                   eps_samples: Sequence[Mapping[int, np.ndarray]], objective: ObjectiveConfig, cfg: AdaptConfig,
                   prior: PriorSpec, total_frames: int) -> Tuple[float, Dict[str, np.ndarray]]:
    """Monte-Carlo bound of one utterance at fixed ``eps`` draws, plus its share of gamma3 * KL."""
    loss = 0.0
    grads: Dict[str, np.ndarray] = {}
    count = len(eps_samples)
    for eps in eps_samples:
        sample_loss, grad_r = _item_loss_and_grads(net, den_graph, item, adapter.sample_r(eps), objective, cfg)
        loss += sample_loss / count
        for layer, g in grad_r.items():
            grads[f"mu.{layer}"] = grads.get(f"mu.{layer}", 0.0) + g / count
            if not cfg.freeze_sigma:
                grads[f"log_sigma.{layer}"] = (grads.get(f"log_sigma.{layer}", 0.0)
                                               + g * adapter.sigma(layer) * eps[layer] / count)
    if objective.gamma3 > 0.0:
        for layer in adapter.layers:
            mu, log_sigma = adapter.params[f"mu.{layer}"], adapter.params[f"log_sigma.{layer}"]
            loss += objective.gamma3 * gaussian_kl(mu, np.exp(log_sigma), prior) / total_frames
            d_mu, d_log_sigma = gaussian_kl_grad(mu, log_sigma, prior)
            grads[f"mu.{layer}"] = grads[f"mu.{layer}"] + objective.gamma3 * d_mu / total_frames
            if not cfg.freeze_sigma:
                grads[f"log_sigma.{layer}"] = (grads[f"log_sigma.{layer}"]
                                               + objective.gamma3 * d_log_sigma / total_frames)
    return loss, grads


def _deterministic_step(net: AcousticNet, den_graph: WeightedGraph, item: AdaptationItem,
                        adapter: SpeakerAdapter, objective: ObjectiveConfig, cfg: AdaptConfig,
                        prior: PriorSpec, total_frames: int) -> Tuple[float, Dict[str, np.ndarray]]:
    """Loss of one utterance at r, plus its share of the MAP penalty when enabled."""
    r_by_layer = adapter.mean_r()
    loss, grad_r = _item_loss_and_grads(net, den_graph, item, r_by_layer, objective, cfg)
    grads = {f"r.{layer}": g for layer, g in grad_r.items()}
    if cfg.regularizer == "map":
        for layer, r in r_by_layer.items():
            penalty, penalty_grad = map_penalty(r, prior, cfg.map_weight)
            loss += penalty / total_frames
            grads[f"r.{layer}"] = grads[f"r.{layer}"] + penalty_grad / total_frames
    return loss, grads


def _estimate(net: AcousticNet, den_graph: WeightedGraph, items: Sequence[AdaptationItem],
              cfg: AdaptConfig, adapter: SpeakerAdapter, prior: PriorSpec) -> SpeakerAdapter:
    """SGD over the speaker's utterances; shared by every adapter family."""
    speaker = adapter.speaker_id
    objective = _effective_objective(cfg)
    total_frames = sum(item.num_frames for item in items)

    for epoch in range(cfg.epochs):
        order = substream(cfg.seed, "order", speaker, epoch).permutation(len(items))
        epoch_loss = 0.0
        for step, idx in enumerate(order):
            item = items[int(idx)]
            if adapter.mode == "bayesian":
                rng = substream(cfg.seed, "sampling", speaker, epoch, step)
                eps_samples = [{layer: rng.standard_normal(len(adapter.params[f"mu.{layer}"]))
                                for layer in adapter.layers} for _ in range(cfg.mc_samples)]
                loss, grads = _bayesian_step(net, den_graph, item, adapter, eps_samples, objective, cfg, prior,
                                             total_frames)
            else:
                loss, grads = _deterministic_step(net, den_graph, item, adapter, objective, cfg, prior,
                                                  total_frames)
            adapter = _apply_update(adapter, grads, cfg.learning_rate, loss, f"epoch {epoch} step {step}")
            epoch_loss += loss * item.num_frames
        logger.info(f"Adaptation {cfg.method} speaker={speaker} epoch={epoch + 1}/{cfg.epochs} "
                    f"loss/frame={epoch_loss / max(total_frames, 1):.4f}")
    return adapter


def estimate_lhuc(net: AcousticNet, den_graph: WeightedGraph, items: Sequence[AdaptationItem],
                  cfg: AdaptConfig, speaker_id: str = "") -> SpeakerAdapter:
    """
    Deterministic LHUC: r starts at 0 and only r is updated.

    MAP-LHUC and KL-LHUC are this estimator with ``cfg.method`` set to
    ``map`` or ``kl``.

    Args:
        net (AcousticNet): Frozen SI (or SAT) model
        den_graph (WeightedGraph): Shared denominator graph
        items: Supervised utterances of one speaker
        cfg (AdaptConfig): Adaptation settings
        speaker_id (str): Speaker the adapter belongs to

    Returns:
        SpeakerAdapter: Deterministic adapter; identity when there is no data or no epoch

    Raises:
        DivergenceError: loss became non-finite; carries the last finite adapter
    """
    adapter = SpeakerAdapter.identity(speaker_id, _hooked_widths(net, cfg.hooked_layers))
    if not items:
        return adapter
    return _estimate(net, den_graph, items, cfg, adapter, cfg.prior)


def estimate_blhuc(net: AcousticNet, den_graph: WeightedGraph, items: Sequence[AdaptationItem],
                   prior: PriorSpec, cfg: AdaptConfig, speaker_id: str = "") -> SpeakerAdapter:
    """
    Bayesian LHUC: minimise the Monte-Carlo bound plus gamma3 * KL(q || prior)
    over (mu, log_sigma) with reparameterised samples r = mu + sigma * eps.

    ``cfg.init_log_sigma = -inf`` with ``cfg.freeze_sigma`` and gamma3 = 0
    reproduces ``estimate_lhuc`` step for step.
    """
    if cfg.mc_samples < 1:
        raise InvalidArgumentError("mc_samples must be >= 1")
    adapter = SpeakerAdapter.identity(speaker_id, _hooked_widths(net, cfg.hooked_layers),
                                      mode="bayesian", init_log_sigma=cfg.init_log_sigma)
    if not items:
        return adapter
    return _estimate(net, den_graph, items, cfg, adapter, prior)


def estimate_adapter(net: AcousticNet, graphs: GraphSet, items: Sequence[AdaptationItem],
                     cfg: AdaptConfig, speaker_id: str) -> SpeakerAdapter:
    if cfg.bayesian:
        return estimate_blhuc(net, graphs.den, items, cfg.prior, cfg, speaker_id)
    return estimate_lhuc(net, graphs.den, items, cfg, speaker_id)


def hypothesise(net: AcousticNet, graphs: GraphSet, utterance: Utterance,
                cfg: AdaptConfig) -> Utterance:
    """First-pass decode: replace labels by the best hypothesis, with a confidence when enabled."""
    scores, _, _ = forward(net, utterance.features)
    best = viterbi_best_path(graphs.decode, scores)
    tokens = [graphs.inventory.tokens[tok] for tok in best.tokens]
    confidence = None
    if cfg.use_confidence:
        lattice = generate_lattice(graphs.decode, scores, cfg.beam)
        confidence = confidence_score(lattice, best, cfg.acoustic_scale)
    return utterance.with_labels(tokens, confidence)


def prepare_items(net: AcousticNet, graphs: GraphSet, utterances: Sequence[Utterance], cfg: AdaptConfig,
                  silence: SilenceModel, buckets: Optional[Sequence[int]] = None) -> List[AdaptationItem]:
    """
    Pad to buckets and build supervision for already-labelled utterances.

    Utterances whose numerator stays infeasible are dropped with a warning.
    """
    items: List[AdaptationItem] = []
    dropped = 0
    for utt in utterances:
        if not utt.labels:
            dropped += 1
            continue
        if cfg.bucket_lengths and buckets:
            try:
                utt = silence_pad(utt, bucket_utterance_lengths(utt.num_frames, buckets), silence,
                                  graphs.inventory.silence_token, seed=cfg.seed)
            except InvalidArgumentError:
                logger.warning(f"Utterance {utt.id} ({utt.num_frames} frames) is longer than every bucket")
        try:
            num_graph = build_numerator_graph(utt.labels, graphs.topology, graphs.inventory,
                                              utt.num_frames, lm=graphs.lm)
        except InfeasibleSupervisionError:
            dropped += 1
            continue

        ce_targets = si_ce = None
        if cfg.supervision == "alignment" or cfg.regularizer == "kl_output":
            si_lfmmi, si_ce, _ = forward(net, utt.features)
            if cfg.supervision == "alignment":
                try:
                    path = viterbi_best_path(num_graph, si_lfmmi)
                except InfeasibleGraphError:
                    dropped += 1
                    continue
                ce_targets = np.zeros((utt.num_frames, num_graph.pdf_count))
                ce_targets[np.arange(utt.num_frames), list(path.pdfs)] = 1.0
        items.append(AdaptationItem(utterance=utt, num_graph=num_graph, ce_targets=ce_targets, si_ce=si_ce))
    if dropped:
        logger.warning(f"Dropped {dropped} infeasible utterance(s) from adaptation")
    return items


def run_unsupervised_adaptation(net: AcousticNet, graphs: GraphSet,
                                data_by_speaker: Mapping[str, Sequence[Utterance]], cfg: AdaptConfig,
                                silence: SilenceModel,
                                buckets: Optional[Sequence[int]] = None) -> Dict[str, SpeakerAdapter]:
    """
    Decode, optionally select by confidence, and estimate one adapter per speaker.

    With ``cfg.oracle`` the reference labels are used instead of the first
    pass. The SI net is only read.

    Args:
        net (AcousticNet): Trained SI or SAT model
        graphs (GraphSet): Shared denominator and decoding graphs
        data_by_speaker: Adaptation utterances grouped by speaker
        cfg (AdaptConfig): Adaptation settings
        silence (SilenceModel): Feature distribution used for padding
        buckets: Length table; built from the adaptation data when omitted

    Returns:
        Dict[str, SpeakerAdapter]: Adapter per speaker, identity when nothing survives selection
    """
    if buckets is None and cfg.bucket_lengths:
        lengths = [u.num_frames for utts in data_by_speaker.values() for u in utts]
        buckets = default_buckets(lengths, cfg.bucket_count) if lengths else None

    adapters: Dict[str, SpeakerAdapter] = {}
    widths = _hooked_widths(net, cfg.hooked_layers)
    mode = "bayesian" if cfg.bayesian else "deterministic"
    for speaker in tqdm(sorted(data_by_speaker), desc=f"adapt[{cfg.method}]", disable=not settings.PROGRESS):
        utterances = sorted(data_by_speaker[speaker], key=lambda u: u.id)
        if cfg.max_utterances is not None:
            utterances = utterances[:cfg.max_utterances]
        if not cfg.oracle:
            utterances = [hypothesise(net, graphs, utt, cfg) for utt in utterances]
            if cfg.use_confidence:
                selected = select_by_confidence(utterances, cfg.selection_rate)
                logger.info(f"Speaker {speaker}: selected {len(selected)}/{len(utterances)} utterances")
                utterances = sorted(selected, key=lambda u: u.id)

        items = prepare_items(net, graphs, utterances, cfg, silence, buckets)
        if not items:
            logger.warning(f"No usable adaptation data for speaker {speaker}; using identity adapter")
            adapters[speaker] = SpeakerAdapter.identity(speaker, widths, mode, cfg.init_log_sigma)
            continue
        adapters[speaker] = estimate_adapter(net, graphs, items, cfg, speaker)
    return adapters


def sat_train(net: AcousticNet, utterances_by_speaker: Mapping[str, Sequence[Utterance]],
              cfg: TrainConfig, graphs: GraphSet) -> TrainingResult:
    """
    Speaker adaptive training: the net and one LHUC adapter per training
    speaker on ``cfg.sat_layers`` are updated jointly.

    Unseen speakers decode with the identity adapter on those layers.
    """
    _hooked_widths(net, cfg.sat_layers)
    return train_acoustic_model(net, graphs, utterances_by_speaker, cfg, sat_layers=cfg.sat_layers)
