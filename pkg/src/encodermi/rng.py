"""Deterministic child random streams derived from one root seed."""
import contextlib
import hashlib
import threading

import numpy as np


def _label_words(labels):
    words = []
    for label in labels:
        digest = hashlib.sha256(str(label).encode()).digest()
        words.append(int.from_bytes(digest[:4], "little"))
    return words


def child_seed_sequence(root_seed, *labels):
    return np.random.SeedSequence(int(root_seed), spawn_key=tuple(_label_words(labels)))


def child_rng(root_seed, *labels):
    """Return a Generator that depends only on ``root_seed`` and the purpose labels."""
    return np.random.default_rng(child_seed_sequence(root_seed, *labels))


def child_seed(root_seed, *labels):
    """A 63-bit integer seed for consumers (torch) that want a plain int."""
    state = child_seed_sequence(root_seed, *labels).generate_state(2, dtype=np.uint32)
    return int((int(state[0]) << 31) ^ int(state[1])) & ((1 << 63) - 1)


_TORCH_INIT_LOCK = threading.RLock()


@contextlib.contextmanager
def torch_seeded(seed):
    """Seed torch's global generator for a block of parameter initialization.

    Layer constructors draw from the global generator, so concurrent jobs
    serialize here; the caller's generator state is restored afterwards.
    """
    import torch

    with _TORCH_INIT_LOCK, torch.random.fork_rng():
        torch.manual_seed(seed)
        yield
