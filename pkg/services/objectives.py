from dataclasses import dataclass
from typing import Optional, Tuple

import numpy as np
from scipy.special import log_softmax, softmax

from core.errors import InvalidArgumentError
from models.domain import FrameScores, PosteriorTable, WeightedGraph
from models.schemas import ObjectiveConfig
from services.graph_inference import forward_backward


@dataclass(frozen=True)
class LossBreakdown:
    """Per-utterance terms, each normalised by frame count.

    ``lfmmi_term`` is the LF-MMI objective (log numerator minus log
    denominator, <= 0); ``total = -gamma1 * lfmmi + gamma2 * ce + gamma3 * kl``.
    """

    lfmmi_term: float
    ce_term: float
    kl_term: float
    total: float


def lfmmi_loss_and_headgrad(num_graph: WeightedGraph, den_graph: WeightedGraph,
                            lfmmi_scores: FrameScores) -> Tuple[float, np.ndarray, PosteriorTable]:
    """
    LF-MMI loss -(log p_num - log p_den) and its gradient w.r.t. the head scores.

    Returns:
        Tuple: loss, (den posterior - num occupancy) gradient, numerator occupancies

    Raises:
        InfeasibleGraphError: numerator has no path of this length
    """
    num_total, num_occ = forward_backward(num_graph, lfmmi_scores)
    den_total, den_occ = forward_backward(den_graph, lfmmi_scores)
    return -(num_total - den_total), den_occ - num_occ, num_occ


def ce_loss_and_headgrad(num_graph: WeightedGraph, ce_scores: FrameScores,
                         num_occupancies: Optional[PosteriorTable] = None) -> Tuple[float, np.ndarray]:
    """
    Cross entropy against numerator occupancies.

    Targets are treated as constants. When ``num_occupancies`` is not given
    they come from forward-backward over ``num_graph`` with the same
    ``ce_scores`` being trained, so the loss is self-training: the head is
    pulled towards its own numerator posteriors and any fixed point of that
    map has zero gradient. ``utterance_objective`` always passes targets
    (LF-MMI head occupancies or alignments), never relying on this default.

    Returns:
        Tuple: loss -sum p log softmax(ce), gradient softmax(ce) - p
    """
    ce_scores = np.asarray(ce_scores, dtype=np.float64)
    if num_occupancies is None:
        _, num_occupancies = forward_backward(num_graph, ce_scores)
    if num_occupancies.shape != ce_scores.shape:
        raise InvalidArgumentError("Occupancies and CE scores must have the same shape")
    loss = -float(np.sum(num_occupancies * log_softmax(ce_scores, axis=1)))
    return loss, softmax(ce_scores, axis=1) - num_occupancies


def interpolated_loss(cfg: ObjectiveConfig, lfmmi_term: float, ce_term: float,
                      kl_term: float = 0.0) -> LossBreakdown:
    """Combine frame-normalised terms as -gamma1 * F_mmi + gamma2 * F_ce + gamma3 * KL."""
    if cfg.gamma1 == 0.0 and cfg.gamma2 == 0.0:
        raise InvalidArgumentError("gamma1 and gamma2 cannot both be zero")
    total = -cfg.gamma1 * lfmmi_term + cfg.gamma2 * ce_term
    if kl_term:
        total += cfg.gamma3 * kl_term
    return LossBreakdown(lfmmi_term=lfmmi_term, ce_term=ce_term, kl_term=kl_term, total=total)


def utterance_objective(cfg: ObjectiveConfig, num_graph: WeightedGraph, den_graph: WeightedGraph,
                        lfmmi_scores: FrameScores, ce_scores: FrameScores,
                        ce_targets: Optional[PosteriorTable] = None
                        ) -> Tuple[LossBreakdown, np.ndarray, np.ndarray]:
    """
    Frame-normalised interpolated loss of one utterance with scaled head gradients.

    The denominator pass is skipped when gamma1 is zero. ``ce_targets``
    overrides the numerator occupancies as CE targets (alignment supervision).

    Returns:
        Tuple: breakdown, gradient for the LF-MMI head, gradient for the CE head
    """
    frames = lfmmi_scores.shape[0]
    if cfg.gamma1 > 0.0:
        mmi_loss, mmi_grad, num_occ = lfmmi_loss_and_headgrad(num_graph, den_graph, lfmmi_scores)
        grad_lfmmi = (cfg.gamma1 / frames) * mmi_grad
    else:
        mmi_loss = 0.0
        grad_lfmmi = np.zeros_like(lfmmi_scores)
        num_occ = None

    targets = ce_targets
    if targets is None and cfg.gamma2 > 0.0:
        targets = num_occ if num_occ is not None else forward_backward(num_graph, lfmmi_scores)[1]
    if cfg.gamma2 > 0.0:
        ce_loss, ce_grad = ce_loss_and_headgrad(num_graph, ce_scores, targets)
        grad_ce = (cfg.gamma2 / frames) * ce_grad
    else:
        ce_loss = 0.0
        grad_ce = np.zeros_like(ce_scores)

    breakdown = interpolated_loss(cfg, -mmi_loss / frames, ce_loss / frames)
    return breakdown, grad_lfmmi, grad_ce
