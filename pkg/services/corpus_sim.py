"""
Synthetic multi-speaker corpus.

Every token owns one Gaussian mean per HMM state (silence uses a single
mean); a token segment of d frames is split evenly across its states. Each
speaker rescales a subset of feature dimensions and adds an offset, which
is the kind of mismatch LHUC rescaling can undo. Token means and the label
bigram come from split-independent sub-streams, so train and test share
the acoustic classes but not the speakers.
"""
import json
from pathlib import Path
from typing import Dict, List, Optional

import numpy as np

from core.errors import CorruptArchiveError, InvalidArgumentError
from core.logging import logger
from models.domain import Corpus, SilenceModel, SpeakerProfile, TokenInventory, Utterance
from models.schemas import CorpusSpec
from utils.binary_io import read_feature_archive_header, read_feature_block, write_feature_archive
from utils.seeding import substream

MANIFEST_FILE = "manifest.tsv"
FEATURES_FILE = "feats.lfx"
METADATA_FILE = "corpus.json"


def _class_means(inventory: TokenInventory, spec: CorpusSpec, states: int) -> np.ndarray:
    """tokens x states x dim; directions are random, norms scale with class_separation."""
    rng = substream(spec.seed, "corpus", "token-means")
    raw = rng.standard_normal((inventory.size, states, spec.feature_dim))
    means = spec.class_separation * raw / np.sqrt(spec.feature_dim) * np.sqrt(2.0)
    means[inventory.silence_index, :] = means[inventory.silence_index, 0]
    return means


def _label_bigram(inventory: TokenInventory, spec: CorpusSpec) -> np.ndarray:
    rng = substream(spec.seed, "corpus", "token-lm")
    speech = inventory.size - 1
    return rng.dirichlet(np.ones(speech), size=speech + 1)


def _speaker_profile(speaker_id: str, spec: CorpusSpec) -> SpeakerProfile:
    dim = spec.feature_dim
    if spec.identity_speakers:
        return SpeakerProfile(speaker_id, np.ones(dim), np.zeros(dim), spec.noise_level)
    rng = substream(spec.seed, "corpus", spec.split, "speakers", speaker_id)
    scale = np.ones(dim)
    scaled = rng.permutation(dim)[:int(round(spec.scaled_fraction * dim))]
    scale[scaled] = spec.speaker_scale ** rng.choice([-1.0, 1.0], size=len(scaled))
    offset = rng.uniform(-spec.speaker_offset, spec.speaker_offset, size=dim)
    return SpeakerProfile(speaker_id, scale, offset, spec.noise_level)


def generate_corpus(inventory: TokenInventory, spec: CorpusSpec, states_per_unit: int = 2) -> Corpus:
    """
    Generate a deterministic synthetic corpus.

    Args:
        inventory (TokenInventory): Tokens; silence is used only for padding segments
        spec (CorpusSpec): Speaker count, utterances per speaker, length ranges, seed and split
        states_per_unit (int): HMM states per token, used to lay out per-state means

    Returns:
        Corpus: Utterances with reference labels (no silence), speaker profiles and silence model
    """
    if spec.min_duration < states_per_unit:
        raise InvalidArgumentError(f"min_duration {spec.min_duration} is shorter than a {states_per_unit}-state unit")
    means = _class_means(inventory, spec, states_per_unit)
    bigram = _label_bigram(inventory, spec)
    speech = [i for i in range(inventory.size) if i != inventory.silence_index]
    sil_mean = means[inventory.silence_index, 0]

    utterances: List[Utterance] = []
    speakers: Dict[str, SpeakerProfile] = {}
    for s in range(spec.n_speakers):
        speaker_id = f"{spec.split}-spk{s:03d}"
        profile = _speaker_profile(speaker_id, spec)
        speakers[speaker_id] = profile
        for u in range(spec.utts_per_speaker):
            utt_id = f"{speaker_id}-utt{u:04d}"
            rng = substream(spec.seed, "corpus", spec.split, utt_id)
            count = int(rng.integers(spec.min_tokens, spec.max_tokens + 1))
            labels = []
            prev = len(speech)  # start row
            for _ in range(count):
                nxt = int(rng.choice(len(speech), p=bigram[prev]))
                labels.append(speech[nxt])
                prev = nxt

            frame_means = [np.repeat(sil_mean[None, :], rng.integers(*spec.silence_frames, endpoint=True), axis=0)]
            for tok in labels:
                duration = int(rng.integers(spec.min_duration, spec.max_duration + 1))
                per_state = np.array_split(np.arange(duration), states_per_unit)
                for state, frames in enumerate(per_state):
                    frame_means.append(np.repeat(means[tok, state][None, :], len(frames), axis=0))
            frame_means.append(np.repeat(sil_mean[None, :], rng.integers(*spec.silence_frames, endpoint=True), axis=0))
            clean = np.concatenate(frame_means, axis=0)
            features = clean * profile.scale + profile.offset + profile.noise_level * rng.standard_normal(clean.shape)
            utterances.append(Utterance(
                id=utt_id,
                speaker_id=speaker_id,
                features=features,
                labels=tuple(inventory.tokens[tok] for tok in labels),
            ))

    silence = SilenceModel(mean=sil_mean.copy(), std=np.full(spec.feature_dim, spec.noise_level))
    logger.info(f"Generated {spec.split} corpus: {spec.n_speakers} speakers, {len(utterances)} utterances "
                f"(seed={spec.seed})")
    return Corpus(inventory=inventory, utterances=tuple(utterances), speakers=speakers, silence=silence,
                  name=spec.split)


def silence_pad(utterance: Utterance, target_frames: int, silence: SilenceModel, silence_token: str,
                seed: int = 0) -> Utterance:
    """
    Extend an utterance to ``target_frames`` with silence frames.

    The labels gain one trailing silence token unless they already end in
    silence. The padding noise is seeded by the utterance id.

    Raises:
        InvalidArgumentError: target shorter than the utterance
    """
    extra = target_frames - utterance.num_frames
    if extra < 0:
        raise InvalidArgumentError(f"Cannot pad {utterance.id} from {utterance.num_frames} down to {target_frames}")
    if extra == 0:
        return utterance
    rng = substream(seed, "pad", utterance.id)
    frames = silence.mean + silence.std * rng.standard_normal((extra, utterance.features.shape[1]))
    labels = utterance.labels if utterance.labels and utterance.labels[-1] == silence_token else (
        *utterance.labels, silence_token)
    return Utterance(id=utterance.id, speaker_id=utterance.speaker_id,
                     features=np.concatenate([utterance.features, frames], axis=0),
                     labels=tuple(labels), confidence=utterance.confidence)


def save_corpus(corpus: Corpus, directory: Path) -> None:
    """Write manifest.tsv, feats.lfx and corpus.json into ``directory``."""
    directory = Path(directory)
    directory.mkdir(parents=True, exist_ok=True)
    offsets = write_feature_archive(directory / FEATURES_FILE, [u.features for u in corpus.utterances])
    lines = [f"{u.id}\t{u.speaker_id}\t{offset}\t{' '.join(u.labels)}"
             for u, offset in zip(corpus.utterances, offsets)]
    (directory / MANIFEST_FILE).write_text("\n".join(lines) + "\n", encoding="utf-8")
    metadata = {
        "name": corpus.name,
        "inventory": {
            "tokens": list(corpus.inventory.tokens),
            "silence_token": corpus.inventory.silence_token,
            "context_mode": corpus.inventory.context_mode,
        },
        "silence": {"mean": corpus.silence.mean.tolist(), "std": corpus.silence.std.tolist()},
        "speakers": {
            spk: {"scale": p.scale.tolist(), "offset": p.offset.tolist(), "noise_level": p.noise_level}
            for spk, p in corpus.speakers.items()
        },
    }
    (directory / METADATA_FILE).write_text(json.dumps(metadata, indent=2), encoding="utf-8")
    logger.info(f"Saved corpus {corpus.name} ({len(corpus.utterances)} utterances) to {directory}")


def load_corpus(directory: Path, inventory: Optional[TokenInventory] = None) -> Corpus:
    """
    Read a corpus written by ``save_corpus``.

    Raises:
        MissingRecordError: a manifest line points outside the archive
        CorruptArchiveError: truncated or checksum-mismatched data, malformed manifest
    """
    directory = Path(directory)
    metadata = json.loads((directory / METADATA_FILE).read_text(encoding="utf-8"))
    if inventory is None:
        inventory = TokenInventory(tokens=tuple(metadata["inventory"]["tokens"]),
                                   silence_token=metadata["inventory"]["silence_token"],
                                   context_mode=metadata["inventory"]["context_mode"])
    archive_path = directory / FEATURES_FILE
    data = archive_path.read_bytes()
    read_feature_archive_header(data, str(archive_path))

    utterances: List[Utterance] = []
    manifest = directory / MANIFEST_FILE
    for lineno, line in enumerate(manifest.read_text(encoding="utf-8").splitlines(), start=1):
        if not line.strip():
            continue
        fields = line.split("\t")
        if len(fields) != 4:
            raise CorruptArchiveError(f"{manifest}:{lineno}: expected 4 tab-separated fields")
        utt_id, speaker_id, offset, labels = fields
        if not offset.isdigit():
            raise CorruptArchiveError(f"{manifest}:{lineno}: bad offset {offset!r}")
        features = read_feature_block(data, int(offset), utt_id, str(archive_path))
        tokens = tuple(labels.split())
        for tok in tokens:
            inventory.index(tok)
        utterances.append(Utterance(id=utt_id, speaker_id=speaker_id, features=features, labels=tokens))

    speakers = {
        spk: SpeakerProfile(spk, np.asarray(p["scale"]), np.asarray(p["offset"]), float(p["noise_level"]))
        for spk, p in metadata["speakers"].items()
    }
    silence = SilenceModel(mean=np.asarray(metadata["silence"]["mean"]), std=np.asarray(metadata["silence"]["std"]))
    return Corpus(inventory=inventory, utterances=tuple(utterances), speakers=speakers, silence=silence,
                  name=metadata["name"])
