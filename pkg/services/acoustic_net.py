from dataclasses import dataclass, field
from typing import Dict, Iterable, List, Mapping, Optional, Tuple, Union

import numpy as np
from scipy.special import expit

from core.errors import InvalidArgumentError, NonFiniteGradientError, TapeConsumedError
from core.logging import logger
from models.domain import AcousticNet, FrameScores, SpeakerAdapter
from utils.seeding import substream

LhucInput = Union[SpeakerAdapter, Mapping[int, np.ndarray], None]


def lhuc_scale(r):
    """xi(r) = 2 * logistic(r), strictly inside (0, 2) for finite r."""
    return 2.0 * expit(r)


def lhuc_scale_grad(r):
    s = expit(r)
    return 2.0 * s * (1.0 - s)


def init_acoustic_net(input_dim: int, widths: Iterable[int], pdf_count: int, seed: int) -> AcousticNet:
    """
    Glorot-uniform initialisation with zero biases from the ``init`` sub-stream.

    Args:
        input_dim (int): Feature dimension
        widths: Hidden layer widths
        pdf_count (int): Output dimension of both heads
        seed (int): Experiment seed

    Returns:
        AcousticNet: Fresh network
    """
    widths = tuple(int(w) for w in widths)
    if input_dim < 1 or pdf_count < 1 or not widths or min(widths) < 1:
        raise InvalidArgumentError("Network dimensions must be positive")
    rng = substream(seed, "init")
    params: Dict[str, np.ndarray] = {}

    def affine(name: str, fan_in: int, fan_out: int):
        bound = np.sqrt(6.0 / (fan_in + fan_out))
        params[f"{name}.weight"] = rng.uniform(-bound, bound, size=(fan_in, fan_out))
        params[f"{name}.bias"] = np.zeros(fan_out)

    fan_in = input_dim
    for layer, width in enumerate(widths):
        affine(f"hidden.{layer}", fan_in, width)
        fan_in = width
    affine("lfmmi", fan_in, pdf_count)
    affine("ce", fan_in, pdf_count)
    logger.info(f"Initialised net {input_dim} -> {list(widths)} -> 2 x {pdf_count} (seed={seed})")
    return AcousticNet(input_dim=input_dim, widths=widths, pdf_count=pdf_count, params=params)


@dataclass
class GradientTape:
    """Forward-pass cache for one utterance; single use."""

    net: AcousticNet
    inputs: List[np.ndarray] = field(default_factory=list)
    pre_activations: List[np.ndarray] = field(default_factory=list)
    activations: List[np.ndarray] = field(default_factory=list)
    lhuc_r: Dict[int, np.ndarray] = field(default_factory=dict)
    top: Optional[np.ndarray] = None
    consumed: bool = False

    def clear(self):
        self.inputs.clear()
        self.pre_activations.clear()
        self.activations.clear()
        self.lhuc_r.clear()
        self.top = None
        self.consumed = True


@dataclass
class Gradients:
    net: Dict[str, np.ndarray] = field(default_factory=dict)
    lhuc: Dict[int, np.ndarray] = field(default_factory=dict)


def _resolve_lhuc(net: AcousticNet, adapter: LhucInput) -> Dict[int, np.ndarray]:
    if adapter is None:
        return {}
    r_by_layer = adapter.mean_r() if isinstance(adapter, SpeakerAdapter) else dict(adapter)
    for layer, r in r_by_layer.items():
        if not 0 <= layer < net.num_hidden:
            raise InvalidArgumentError(f"LHUC layer {layer} outside 0..{net.num_hidden - 1}")
        if np.shape(r) != (net.widths[layer],):
            raise InvalidArgumentError(f"LHUC vector for layer {layer} has shape {np.shape(r)}, "
                                       f"expected ({net.widths[layer]},)")
    return r_by_layer


def forward(net: AcousticNet, features: np.ndarray,
            adapter: LhucInput = None) -> Tuple[FrameScores, FrameScores, GradientTape]:
    """
    Run the net, rescaling hooked hidden layers by xi(r).

    Args:
        net (AcousticNet): Network
        features (np.ndarray): frames x input_dim
        adapter: SpeakerAdapter (posterior mean for Bayesian ones), a
            layer -> r mapping, or None for the SI model

    Returns:
        Tuple: LF-MMI head scores, CE head logits, tape for ``backward``
    """
    features = np.asarray(features, dtype=np.float64)
    if features.ndim != 2 or features.shape[1] != net.input_dim:
        raise InvalidArgumentError(f"Features of shape {features.shape} do not match input dim {net.input_dim}")
    r_by_layer = _resolve_lhuc(net, adapter)
    tape = GradientTape(net=net, lhuc_r=r_by_layer)

    x = features
    for layer in range(net.num_hidden):
        tape.inputs.append(x)
        z = x @ net.params[f"hidden.{layer}.weight"] + net.params[f"hidden.{layer}.bias"]
        h = np.maximum(z, 0.0)
        tape.pre_activations.append(z)
        tape.activations.append(h)
        x = h * lhuc_scale(r_by_layer[layer]) if layer in r_by_layer else h
    tape.top = x
    lfmmi = x @ net.params["lfmmi.weight"] + net.params["lfmmi.bias"]
    ce = x @ net.params["ce.weight"] + net.params["ce.bias"]
    return lfmmi, ce, tape


def backward(tape: GradientTape, grad_lfmmi: Optional[np.ndarray], grad_ce: Optional[np.ndarray],
             wrt: Iterable[str] = ("net", "lhuc")) -> Gradients:
    """
    Back-propagate head gradients through the hidden stack and xi(r).

    Args:
        tape (GradientTape): Tape from ``forward``; consumed by this call
        grad_lfmmi: dLoss/d(LF-MMI head scores), frames x pdf_count, or None for zero
        grad_ce: dLoss/d(CE head logits), or None for zero
        wrt: Any of ``"net"`` and ``"lhuc"``

    Returns:
        Gradients: net parameter gradients and/or per-layer dLoss/dr
    """
    if tape.consumed:
        raise TapeConsumedError("Gradient tape already consumed")
    wrt = set(wrt)
    net = tape.net
    top = tape.top
    shape = (top.shape[0], net.pdf_count)
    grad_lfmmi = np.zeros(shape) if grad_lfmmi is None else np.asarray(grad_lfmmi, dtype=np.float64)
    grad_ce = np.zeros(shape) if grad_ce is None else np.asarray(grad_ce, dtype=np.float64)
    if grad_lfmmi.shape != shape or grad_ce.shape != shape:
        raise InvalidArgumentError(f"Head gradients must have shape {shape}")

    grads = Gradients()
    if "net" in wrt:
        grads.net["lfmmi.weight"] = top.T @ grad_lfmmi
        grads.net["lfmmi.bias"] = grad_lfmmi.sum(axis=0)
        grads.net["ce.weight"] = top.T @ grad_ce
        grads.net["ce.bias"] = grad_ce.sum(axis=0)

    upstream = grad_lfmmi @ net.params["lfmmi.weight"].T + grad_ce @ net.params["ce.weight"].T
    for layer in reversed(range(net.num_hidden)):
        h = tape.activations[layer]
        if layer in tape.lhuc_r:
            r = tape.lhuc_r[layer]
            if "lhuc" in wrt:
                grads.lhuc[layer] = (upstream * h).sum(axis=0) * lhuc_scale_grad(r)
            upstream = upstream * lhuc_scale(r)
        grad_z = upstream * (tape.pre_activations[layer] > 0.0)
        if "net" in wrt:
            grads.net[f"hidden.{layer}.weight"] = tape.inputs[layer].T @ grad_z
            grads.net[f"hidden.{layer}.bias"] = grad_z.sum(axis=0)
        if layer > 0:
            upstream = grad_z @ net.params[f"hidden.{layer}.weight"].T

    tape.clear()
    return grads


def sgd_step(params: Mapping[str, np.ndarray], grads: Mapping[str, np.ndarray],
             learning_rate: float) -> Dict[str, np.ndarray]:
    """
    Plain SGD: p <- p - lr * g for every parameter that has a gradient.

    Raises:
        NonFiniteGradientError: any gradient entry is NaN or infinite
    """
    offending = {name: int(np.size(g) - np.count_nonzero(np.isfinite(g)))
                 for name, g in grads.items() if not np.all(np.isfinite(g))}
    if offending:
        logger.error(f"Non-finite gradients, aborting update: {offending}")
        raise NonFiniteGradientError(f"Non-finite gradient in {sorted(offending)}", offending)
    unknown = set(grads) - set(params)
    if unknown:
        raise InvalidArgumentError(f"Gradients for unknown parameters: {sorted(unknown)}")
    return {name: (value - learning_rate * grads[name] if name in grads else value)
            for name, value in params.items()}
