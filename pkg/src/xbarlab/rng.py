"""Deterministic labeled random streams.

Every source of randomness in an experiment is drawn from a stream named by
a short label ("init", "faults", "write", ...). A stream is derived from
(master_seed, label) by hashing the label into seed-sequence words, so

  * the same (seed, label) always yields the same sequence, and
  * streams with distinct labels are statistically independent.

Consumers receive plain ``numpy.random.Generator`` objects.
"""

from __future__ import annotations

import hashlib

import numpy as np

# Canonical labels used by the experiment harness. Sub-labels are formed
# with "/" (e.g. "faults/layer1") so per-layer streams stay independent.
LABEL_INIT = "init"
LABEL_FAULTS = "faults"
LABEL_WRITE = "write"
LABEL_RSA_SELECT = "rsa-select"
LABEL_SW_MASK = "sw-mask"
LABEL_SW_SHORTCUT = "sw-shortcut"
LABEL_CGAP_NOISE = "cgap-noise"
LABEL_SHUFFLE = "shuffle"


def _label_words(label: str) -> list[int]:
    digest = hashlib.sha256(label.encode("utf-8")).digest()
    return [int.from_bytes(digest[i : i + 4], "little") for i in range(0, 16, 4)]


def derive_generator(master_seed: int, label: str) -> np.random.Generator:
    """Fresh generator for (master_seed, label); same pair, same sequence."""
    if not 0 <= master_seed < 2**64:
        raise ValueError(f"master_seed must be a u64, got {master_seed}")
    seq = np.random.SeedSequence([master_seed & 0xFFFFFFFF, master_seed >> 32] + _label_words(label))
    return np.random.default_rng(seq)


class RngStreams:
    """Factory for the labeled substreams of one experiment.

    ``stream(label)`` returns a fresh generator positioned at the start of
    the label's sequence. Callers that need several independent draws should
    use distinct labels rather than calling ``stream`` twice with one label.
    """

    def __init__(self, master_seed: int):
        self.master_seed = int(master_seed)

    def stream(self, label: str) -> np.random.Generator:
        return derive_generator(self.master_seed, label)

    def __repr__(self) -> str:
        return f"RngStreams(master_seed={self.master_seed})"
