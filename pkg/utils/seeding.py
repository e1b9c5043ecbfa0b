import hashlib

import numpy as np


def substream(seed: int, *names) -> np.random.Generator:
    """
    Derive an independent, platform-stable generator from the config seed.

    Names are hashed with SHA-256 (never Python's salted ``hash``), so the
    same (seed, names) pair yields the same PCG64 stream everywhere.

    Args:
        seed (int): Experiment seed
        *names: Sub-stream path, e.g. ``("sampling", speaker_id, epoch, step)``

    Returns:
        np.random.Generator: Seeded generator
    """
    digest = hashlib.sha256("/".join(str(name) for name in names).encode("utf-8")).digest()
    words = np.frombuffer(digest, dtype="<u4").tolist()
    return np.random.Generator(np.random.PCG64(np.random.SeedSequence([int(seed) & 0xFFFFFFFF, *words])))
