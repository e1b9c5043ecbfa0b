"""
Versioned little-endian binary formats; layouts are documented in docs/formats.md.

  LFX1  feature archive (per-utterance frames x dim float64 blocks with CRC32)
  LFN1  acoustic model checkpoint
  LFG1  weighted graph
  LFA1  speaker adapter

The token LM is stored as JSON alongside them.
"""
import json
import struct
import zlib
from pathlib import Path
from typing import List, Sequence, Tuple

import numpy as np

from core.errors import BadMagicError, CorruptArchiveError, MissingRecordError
from core.logging import logger
from models.domain import AcousticNet, SpeakerAdapter, TokenNgramLm, WeightedGraph

FORMAT_VERSION = 1
FEATURE_MAGIC = b"LFX1"
NET_MAGIC = b"LFN1"
GRAPH_MAGIC = b"LFG1"
ADAPTER_MAGIC = b"LFA1"

ARC_DTYPE = np.dtype([("src", "<i4"), ("dst", "<i4"), ("pdf", "<i4"), ("olabel", "<i4"), ("weight", "<f8")])


class _Reader:
    def __init__(self, data: bytes, source: str, offset: int = 0):
        self.data = data
        self.source = source
        self.pos = offset

    def take(self, size: int) -> bytes:
        if size < 0 or self.pos + size > len(self.data):
            raise CorruptArchiveError(f"{self.source}: truncated at byte {self.pos} (wanted {size} more)")
        chunk = self.data[self.pos:self.pos + size]
        self.pos += size
        return chunk

    def unpack(self, fmt: str):
        return struct.unpack(fmt, self.take(struct.calcsize(fmt)))

    def floats(self, count: int) -> np.ndarray:
        return np.frombuffer(self.take(8 * count), dtype="<f8").astype(np.float64)

    def magic(self, expected: bytes):
        found = self.take(4)
        if found != expected:
            raise BadMagicError(f"{self.source}: expected magic {expected!r}, found {found!r}")
        (version,) = self.unpack("<I")
        if version != FORMAT_VERSION:
            raise CorruptArchiveError(f"{self.source}: unsupported version {version}")


def _f8(array: np.ndarray) -> bytes:
    return np.ascontiguousarray(array, dtype="<f8").tobytes()


# ---- LFX1 feature archive -------------------------------------------------

def write_feature_archive(path: Path, blocks: Sequence[np.ndarray]) -> List[int]:
    """
    Write feature matrices to one archive.

    Returns:
        List[int]: byte offset of each block header, in input order
    """
    offsets: List[int] = []
    parts = [FEATURE_MAGIC, struct.pack("<II", FORMAT_VERSION, len(blocks))]
    position = sum(len(p) for p in parts)
    for block in blocks:
        block = np.asarray(block, dtype=np.float64)
        if block.ndim != 2:
            raise CorruptArchiveError(f"Feature block must be 2-D, got shape {block.shape}")
        payload = _f8(block)
        header = struct.pack("<III", block.shape[0], block.shape[1], zlib.crc32(payload))
        offsets.append(position)
        parts.extend([header, payload])
        position += len(header) + len(payload)
    Path(path).write_bytes(b"".join(parts))
    return offsets


def read_feature_archive_header(data: bytes, source: str) -> int:
    reader = _Reader(data, source)
    reader.magic(FEATURE_MAGIC)
    (count,) = reader.unpack("<I")
    return count


def read_feature_block(data: bytes, offset: int, record_id: str, source: str) -> np.ndarray:
    """
    Read one block, verifying its shape and CRC32.

    Raises:
        MissingRecordError: offset does not point inside the archive
        CorruptArchiveError: truncated block or checksum mismatch
    """
    if offset < 12 or offset >= len(data):
        raise MissingRecordError(f"{source}: no record for utterance {record_id} at offset {offset}", record_id)
    reader = _Reader(data, source, offset)
    frames, dim, crc = reader.unpack("<III")
    payload = reader.take(8 * frames * dim)
    if zlib.crc32(payload) != crc:
        raise CorruptArchiveError(f"{source}: checksum mismatch for utterance {record_id}")
    return np.frombuffer(payload, dtype="<f8").astype(np.float64).reshape(frames, dim)


# ---- LFN1 checkpoint ------------------------------------------------------

def _net_param_order(input_dim: int, widths: Sequence[int], pdf_count: int) -> List[Tuple[str, tuple]]:
    order = []
    fan_in = input_dim
    for layer, width in enumerate(widths):
        order += [(f"hidden.{layer}.weight", (fan_in, width)), (f"hidden.{layer}.bias", (width,))]
        fan_in = width
    for head in ("lfmmi", "ce"):
        order += [(f"{head}.weight", (fan_in, pdf_count)), (f"{head}.bias", (pdf_count,))]
    return order


def save_net(net: AcousticNet, path: Path) -> None:
    parts = [NET_MAGIC, struct.pack("<III", FORMAT_VERSION, net.input_dim, net.num_hidden),
             struct.pack(f"<{net.num_hidden}I", *net.widths), struct.pack("<I", net.pdf_count)]
    for name, shape in _net_param_order(net.input_dim, net.widths, net.pdf_count):
        parts.append(_f8(net.params[name].reshape(shape)))
    body = b"".join(parts)
    Path(path).write_bytes(body + struct.pack("<I", zlib.crc32(body)))
    logger.info(f"Saved acoustic model to {path}")


def load_net(path: Path) -> AcousticNet:
    data = Path(path).read_bytes()
    if len(data) < 4:
        raise CorruptArchiveError(f"{path}: file too short")
    body, (crc,) = data[:-4], struct.unpack("<I", data[-4:])
    reader = _Reader(body, str(path))
    reader.magic(NET_MAGIC)
    if zlib.crc32(body) != crc:
        raise CorruptArchiveError(f"{path}: checksum mismatch")
    input_dim, num_hidden = reader.unpack("<II")
    widths = reader.unpack(f"<{num_hidden}I")
    (pdf_count,) = reader.unpack("<I")
    params = {}
    for name, shape in _net_param_order(input_dim, widths, pdf_count):
        params[name] = reader.floats(int(np.prod(shape))).reshape(shape)
    return AcousticNet(input_dim=input_dim, widths=tuple(widths), pdf_count=pdf_count, params=params)


# ---- LFG1 graph -----------------------------------------------------------

def save_graph(graph: WeightedGraph, path: Path) -> None:
    arcs = np.zeros(graph.num_arcs, dtype=ARC_DTYPE)
    arcs["src"], arcs["dst"], arcs["pdf"] = graph.src, graph.dst, graph.pdf
    arcs["olabel"], arcs["weight"] = graph.olabel, graph.log_weight
    Path(path).write_bytes(b"".join([
        GRAPH_MAGIC,
        struct.pack("<IIIII", FORMAT_VERSION, graph.num_states, graph.num_arcs, graph.start, graph.pdf_count),
        _f8(graph.final_log_weight),
        arcs.tobytes(),
    ]))


def load_graph(path: Path) -> WeightedGraph:
    reader = _Reader(Path(path).read_bytes(), str(path))
    reader.magic(GRAPH_MAGIC)
    num_states, num_arcs, start, pdf_count = reader.unpack("<IIII")
    finals = reader.floats(num_states)
    arcs = np.frombuffer(reader.take(ARC_DTYPE.itemsize * num_arcs), dtype=ARC_DTYPE)
    return WeightedGraph(num_states=num_states, start=start, src=arcs["src"], dst=arcs["dst"], pdf=arcs["pdf"],
                         olabel=arcs["olabel"], log_weight=arcs["weight"], final_log_weight=finals,
                         pdf_count=pdf_count)


# ---- LFA1 adapter ---------------------------------------------------------

def save_adapter(adapter: SpeakerAdapter, path: Path) -> None:
    speaker = adapter.speaker_id.encode("utf-8")
    bayesian = adapter.mode == "bayesian"
    parts = [ADAPTER_MAGIC, struct.pack("<IBI", FORMAT_VERSION, int(bayesian), len(speaker)), speaker,
             struct.pack("<I", len(adapter.layers))]
    for layer in adapter.layers:
        if bayesian:
            vectors = [adapter.params[f"mu.{layer}"], adapter.params[f"log_sigma.{layer}"]]
        else:
            vectors = [adapter.params[f"r.{layer}"]]
        parts.append(struct.pack("<II", layer, len(vectors[0])))
        parts.extend(_f8(v) for v in vectors)
    Path(path).write_bytes(b"".join(parts))


def load_adapter(path: Path) -> SpeakerAdapter:
    reader = _Reader(Path(path).read_bytes(), str(path))
    reader.magic(ADAPTER_MAGIC)
    bayesian, speaker_len = reader.unpack("<BI")
    speaker = reader.take(speaker_len).decode("utf-8")
    (num_layers,) = reader.unpack("<I")
    params = {}
    for _ in range(num_layers):
        layer, dim = reader.unpack("<II")
        if bayesian:
            params[f"mu.{layer}"] = reader.floats(dim)
            params[f"log_sigma.{layer}"] = reader.floats(dim)
        else:
            params[f"r.{layer}"] = reader.floats(dim)
    return SpeakerAdapter(speaker_id=speaker, mode="bayesian" if bayesian else "deterministic", params=params)


# ---- token LM (JSON) ------------------------------------------------------

def save_lm(lm: TokenNgramLm, path: Path) -> None:
    """Expanded per-history tables; -inf entries are written as null."""
    payload = {
        "format": "token-ngram",
        "version": FORMAT_VERSION,
        "order": lm.order,
        "discount": lm.discount,
        "vocab": list(lm.vocab),
        "histories": [
            {"history": list(history),
             "logprobs": [float(v) if np.isfinite(v) else None for v in lm.table[history]]}
            for history in lm.histories()
        ],
    }
    Path(path).write_text(json.dumps(payload, indent=1), encoding="utf-8")


def load_lm(path: Path) -> TokenNgramLm:
    try:
        payload = json.loads(Path(path).read_text(encoding="utf-8"))
    except json.JSONDecodeError as e:
        raise CorruptArchiveError(f"{path}: invalid LM JSON ({e})") from e
    if payload.get("format") != "token-ngram" or payload.get("version") != FORMAT_VERSION:
        raise BadMagicError(f"{path}: not a version {FORMAT_VERSION} token LM")
    table = {
        tuple(entry["history"]): np.array([-np.inf if v is None else v for v in entry["logprobs"]])
        for entry in payload["histories"]
    }
    return TokenNgramLm(order=payload["order"], vocab=tuple(payload["vocab"]), table=table,
                        discount=payload["discount"])
