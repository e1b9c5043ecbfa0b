from typing import Dict, Mapping, Optional, Sequence, Tuple

from tqdm import tqdm

from core.config import settings
from core.logging import logger
from models.domain import AcousticNet, BestPath, GraphSet, SpeakerAdapter, Utterance
from services.acoustic_net import forward
from services.graph_inference import viterbi_best_path
from services.token_graphs import strip_silence


def decode_utterance(net: AcousticNet, graphs: GraphSet, utterance: Utterance,
                     adapter: Optional[SpeakerAdapter] = None) -> Tuple[Tuple[str, ...], BestPath]:
    """Viterbi decode with the LF-MMI head; Bayesian adapters use their posterior mean."""
    scores, _, _ = forward(net, utterance.features, adapter)
    best = viterbi_best_path(graphs.decode, scores)
    return tuple(graphs.inventory.tokens[tok] for tok in best.tokens), best


def decode_corpus(net: AcousticNet, graphs: GraphSet, utterances: Sequence[Utterance],
                  adapters: Optional[Mapping[str, SpeakerAdapter]] = None) -> Dict[str, Tuple[str, ...]]:
    """
    Decode every utterance, applying its speaker's adapter when one exists.

    Returns:
        Dict[str, Tuple[str, ...]]: Hypothesis tokens without silence, keyed by utterance id
    """
    adapters = adapters or {}
    hypotheses: Dict[str, Tuple[str, ...]] = {}
    for utt in tqdm(utterances, desc="decode", disable=not settings.PROGRESS):
        tokens, _ = decode_utterance(net, graphs, utt, adapters.get(utt.speaker_id))
        hypotheses[utt.id] = strip_silence(tokens, graphs.inventory)
    logger.info(f"Decoded {len(hypotheses)} utterances ({len(adapters)} adapters)")
    return hypotheses
