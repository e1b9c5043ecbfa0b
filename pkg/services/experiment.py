"""
Experiment orchestration shared by the CLI commands: SI/SAT training,
the adaptation condition grid and the data-amount sweep.
"""
import time
from typing import Dict, List, Mapping, Optional, Sequence, Tuple

from core.config import ExperimentConfig
from core.logging import logger
from models.domain import Corpus, SpeakerAdapter, TokenInventory
from models.schemas import AdaptConfig, ConditionResult, MetricsReport, ObjectiveConfig, SweepPoint
from services.acoustic_net import init_acoustic_net
from services.adaptation import run_unsupervised_adaptation, sat_train
from services.corpus_sim import generate_corpus
from services.decoding import decode_corpus
from services.model_store import ModelBundle
from services.scoring import apply_baseline, score_token_error_rate
from services.token_graphs import build_hmm_topology
from services.training import build_model_graphs, train_acoustic_model

SI_BASELINE = "SI"

# name -> (model, AdaptConfig overrides); model is "si" or "sat"
ADAPTATION_CONDITIONS: Dict[str, Tuple[str, dict]] = {
    "LHUC": ("si", {"method": "lhuc"}),
    "LHUC+conf": ("si", {"method": "lhuc", "use_confidence": True}),
    "BLHUC": ("si", {"method": "blhuc"}),
    "BLHUC+conf": ("si", {"method": "blhuc", "use_confidence": True}),
    "MAP-LHUC": ("si", {"method": "map"}),
    "KL-LHUC": ("si", {"method": "kl"}),
    "LHUC-oracle": ("si", {"method": "lhuc", "oracle": True}),
    "BLHUC-align": ("si", {"method": "blhuc", "supervision": "alignment"}),
    "SAT+LHUC": ("sat", {"method": "lhuc"}),
    "SAT+BLHUC": ("sat", {"method": "blhuc"}),
}
CRITERIA = ("ce", "mmi+ce")
SWEEP_METHODS = ("LHUC", "BLHUC")


def build_inventory(config: ExperimentConfig) -> TokenInventory:
    return TokenInventory(tokens=tuple(config.token_list), silence_token=config.silence_token,
                          context_mode=config.context_mode)


def make_corpus(config: ExperimentConfig, split: str) -> Corpus:
    return generate_corpus(build_inventory(config), config.corpus_spec(split), config.states_per_unit)


def train_model(config: ExperimentConfig, corpus: Corpus, sat: bool = False) -> ModelBundle:
    """
    Train the SI model, or the SAT model with per-speaker adapters, from a fresh init.

    Args:
        config (ExperimentConfig): Experiment configuration
        corpus (Corpus): Training corpus with reference labels
        sat (bool): Train speaker-adaptively on ``config.sat_layers``

    Returns:
        ModelBundle: Net, graphs and (for SAT) training-speaker adapters
    """
    topology = build_hmm_topology(config.states_per_unit)
    graphs = build_model_graphs(corpus.inventory, topology, corpus.utterances, config.lm_order, config.lm_weight)
    widths = [config.hidden_width] * config.hidden_layers
    net = init_acoustic_net(corpus.feature_dim, widths, graphs.pdf_count, config.seed)
    train_cfg = config.train_config()
    if sat:
        result = sat_train(net, corpus.by_speaker(), train_cfg, graphs)
        return ModelBundle(net=result.net, graphs=graphs, sat_adapters=result.adapters,
                           sat_layers=tuple(train_cfg.sat_layers))
    result = train_acoustic_model(net, graphs, corpus.by_speaker(), train_cfg)
    return ModelBundle(net=result.net, graphs=graphs)


def evaluate(bundle: ModelBundle, corpus: Corpus, condition: str,
             adapters: Optional[Mapping[str, SpeakerAdapter]] = None) -> ConditionResult:
    hypotheses = decode_corpus(bundle.net, bundle.graphs, corpus.utterances, adapters)
    references = {u.id: u.labels for u in corpus.utterances}
    speakers = {u.id: u.speaker_id for u in corpus.utterances}
    return score_token_error_rate(hypotheses, references, condition=condition, test_set=corpus.name,
                                  speaker_of=speakers, ignore=[corpus.inventory.silence_token])


def adapt_and_evaluate(bundle: ModelBundle, corpus: Corpus, cfg: AdaptConfig,
                       condition: str) -> ConditionResult:
    """Unsupervised adaptation on each test speaker's own data, then re-decoding."""
    adapters = run_unsupervised_adaptation(bundle.net, bundle.graphs, corpus.by_speaker(), cfg, corpus.silence)
    return evaluate(bundle, corpus, condition, adapters)


def condition_config(base: AdaptConfig, criterion: str, overrides: dict,
                     gamma3: Optional[float] = None) -> AdaptConfig:
    """Apply a condition on top of the base config; gamma3 stays at its default unless given."""
    scales = ObjectiveConfig.for_criterion(criterion)
    objective = ObjectiveConfig(gamma1=scales.gamma1, gamma2=scales.gamma2, gamma3=gamma3)
    return base.model_copy(update={**overrides, "objective": objective})


def run_experiment(config: ExperimentConfig, criteria: Sequence[str] = CRITERIA,
                   conditions: Optional[Sequence[str]] = None, sweep: bool = True,
                   models: Optional[Mapping[str, ModelBundle]] = None,
                   test_corpus: Optional[Corpus] = None) -> MetricsReport:
    """
    Run the condition grid and the data-amount sweep.

    Args:
        config (ExperimentConfig): Experiment configuration
        criteria: Adaptation criteria to run each condition under
        conditions: Subset of ``ADAPTATION_CONDITIONS`` names; all when None
        sweep (bool): Also sweep ``max_utterances`` over ``config.sweep_list``
        models: Pre-trained ``si``/``sat`` bundles; trained here when missing
        test_corpus: Evaluation corpus; generated when missing

    Returns:
        MetricsReport: Results with relative reductions against the SI baseline
    """
    timings: Dict[str, float] = {}
    started = time.perf_counter()
    models = dict(models or {})
    names = list(conditions) if conditions is not None else list(ADAPTATION_CONDITIONS)
    needs_sat = any(ADAPTATION_CONDITIONS[name][0] == "sat" for name in names)

    train_corpus = None
    if "si" not in models or (needs_sat and "sat" not in models):
        train_corpus = make_corpus(config, "train")
    if test_corpus is None:
        test_corpus = make_corpus(config, "test")
    if "si" not in models:
        models["si"] = train_model(config, train_corpus)
    if needs_sat and "sat" not in models:
        models["sat"] = train_model(config, train_corpus, sat=True)
    timings["training"] = time.perf_counter() - started

    results: List[ConditionResult] = [evaluate(models["si"], test_corpus, SI_BASELINE)]
    if "sat" in models:
        results.append(evaluate(models["sat"], test_corpus, "SAT"))

    base_cfg = config.adapt_config()
    adapt_started = time.perf_counter()
    for criterion in criteria:
        for name in names:
            model, overrides = ADAPTATION_CONDITIONS[name]
            cfg = condition_config(base_cfg, criterion, overrides, config.gamma3)
            logger.info(f"Running condition {name} [{criterion}]")
            results.append(adapt_and_evaluate(models[model], test_corpus, cfg, f"{name}[{criterion}]"))
    timings["adaptation"] = time.perf_counter() - adapt_started

    points: List[SweepPoint] = []
    if sweep:
        sweep_started = time.perf_counter()
        for name in SWEEP_METHODS:
            _, overrides = ADAPTATION_CONDITIONS[name]
            for count in config.sweep_list:
                cfg = condition_config(base_cfg, config.criterion, {**overrides, "max_utterances": count},
                                       config.gamma3)
                result = adapt_and_evaluate(models["si"], test_corpus, cfg, name)
                points.append(SweepPoint(condition=name, utterances_per_speaker=count, ter=result.counts.ter))
        timings["sweep"] = time.perf_counter() - sweep_started

    timings["total"] = time.perf_counter() - started
    report = MetricsReport(seed=config.seed, conditions=results, sweep=points, wall_clock_seconds=timings)
    return apply_baseline(report, SI_BASELINE)
