from dataclasses import dataclass, field
from typing import Dict, List, Mapping, Optional, Sequence, Tuple

import numpy as np
from tqdm import tqdm

from core.config import settings
from core.errors import DivergenceError, InfeasibleSupervisionError
from core.logging import logger
from models.domain import AcousticNet, GraphSet, HmmTopology, SpeakerAdapter, TokenInventory, Utterance, WeightedGraph
from models.schemas import TrainConfig
from services.acoustic_net import backward, forward, sgd_step
from services.objectives import utterance_objective
from services.token_graphs import build_graph_set, build_numerator_graph, estimate_token_ngram
from utils.seeding import substream


@dataclass
class TrainingResult:
    net: AcousticNet
    adapters: Dict[str, SpeakerAdapter] = field(default_factory=dict)
    loss_history: List[float] = field(default_factory=list)


def lm_training_sequences(utterances: Sequence[Utterance], inventory: TokenInventory) -> List[List[str]]:
    """Reference transcripts wrapped in silence, matching how the audio is laid out."""
    sil = inventory.silence_token
    return [[sil, *utt.labels, sil] for utt in utterances]


def build_model_graphs(inventory: TokenInventory, topology: HmmTopology, utterances: Sequence[Utterance],
                       lm_order: int, lm_weight: float = 1.0) -> GraphSet:
    """
    Estimate the token LM on the training references and compile the shared graphs.

    Args:
        inventory (TokenInventory): Token inventory
        topology (HmmTopology): Per-token HMM
        utterances: Training utterances with reference labels
        lm_order (int): n-gram order
        lm_weight (float): LM scale inside the decoding graph

    Returns:
        GraphSet: LM plus denominator and decoding graphs
    """
    lm = estimate_token_ngram(lm_training_sequences(utterances, inventory), lm_order, vocab=inventory.tokens)
    return build_graph_set(inventory, topology, lm, lm_weight)


def prepare_training_data(graphs: GraphSet, utterances_by_speaker: Mapping[str, Sequence[Utterance]]
                          ) -> List[Tuple[str, Utterance, WeightedGraph]]:
    items = []
    dropped = 0
    for speaker in sorted(utterances_by_speaker):
        for utt in sorted(utterances_by_speaker[speaker], key=lambda u: u.id):
            try:
                num = build_numerator_graph(utt.labels, graphs.topology, graphs.inventory,
                                            utt.num_frames, lm=graphs.lm)
            except InfeasibleSupervisionError as e:
                logger.warning(f"Skipping training utterance {utt.id}: {e}")
                dropped += 1
                continue
            items.append((speaker, utt, num))
    logger.info(f"Prepared {len(items)} training utterances ({dropped} dropped)")
    return items


def train_acoustic_model(net: AcousticNet, graphs: GraphSet,
                         utterances_by_speaker: Mapping[str, Sequence[Utterance]], cfg: TrainConfig,
                         sat_layers: Optional[Sequence[int]] = None) -> TrainingResult:
    """
    SGD on -gamma1 * F_mmi + gamma2 * F_ce with reference supervision.

    Each step processes one whole utterance with per-frame normalisation.
    When ``sat_layers`` is given, every training speaker also owns an LHUC
    adapter on those layers that is updated jointly with the net.

    Args:
        net (AcousticNet): Initial model, not modified
        graphs (GraphSet): Shared graphs
        utterances_by_speaker: Training data grouped by speaker
        cfg (TrainConfig): Epochs, learning rate, objective and seed
        sat_layers: Hidden layers carrying speaker adapters, or None for SI training

    Returns:
        TrainingResult: Trained net, SAT adapters and per-epoch loss per frame
    """
    items = prepare_training_data(graphs, utterances_by_speaker)
    sat = sat_layers is not None
    adapters: Dict[str, SpeakerAdapter] = {}
    if sat:
        widths = {layer: net.widths[layer] for layer in sat_layers}
        adapters = {speaker: SpeakerAdapter.identity(speaker, widths) for speaker in sorted(utterances_by_speaker)}
    wrt = ("net", "lhuc") if sat else ("net",)
    label = "sat" if sat else "train"

    params = dict(net.params)
    history: List[float] = []
    for epoch in range(cfg.epochs):
        order = substream(cfg.seed, label, "order", epoch).permutation(len(items))
        total, frames = 0.0, 0
        for idx in tqdm(order, desc=f"{label} epoch {epoch + 1}/{cfg.epochs}", disable=not settings.PROGRESS):
            speaker, utt, num = items[int(idx)]
            current = net.with_params(params)
            lfmmi, ce, tape = forward(current, utt.features, adapters.get(speaker))
            breakdown, grad_lfmmi, grad_ce = utterance_objective(cfg.objective, num, graphs.den, lfmmi, ce)
            if not np.isfinite(breakdown.total):
                logger.error(f"Non-finite training loss on {utt.id} in epoch {epoch}")
                raise DivergenceError(f"Training loss became non-finite on utterance {utt.id}")
            grads = backward(tape, grad_lfmmi, grad_ce, wrt=wrt)
            params = sgd_step(params, grads.net, cfg.learning_rate)
            if sat:
                adapter = adapters[speaker]
                lhuc_grads = {f"r.{layer}": g for layer, g in grads.lhuc.items()}
                adapters[speaker] = SpeakerAdapter(speaker, adapter.mode,
                                                   sgd_step(adapter.params, lhuc_grads, cfg.learning_rate))
            total += breakdown.total * utt.num_frames
            frames += utt.num_frames
        history.append(total / max(frames, 1))
        logger.info(f"{label} epoch {epoch + 1}/{cfg.epochs}: loss/frame={history[-1]:.4f}")

    return TrainingResult(net=net.with_params(params), adapters=adapters, loss_history=history)
