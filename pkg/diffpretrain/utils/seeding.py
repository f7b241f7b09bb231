from typing import List

import numpy as np
import torch


def derive_seed(*keys: int) -> int:
    """Stable 63-bit seed from a tuple of integer keys (order matters)."""
    state = np.random.SeedSequence([int(k) for k in keys]).generate_state(2, dtype=np.uint32)
    return int((int(state[0]) << 31) ^ int(state[1])) & ((1 << 63) - 1)


def spawn_seeds(seed: int, n: int) -> List[int]:
    return [int(s) for s in np.random.SeedSequence(int(seed)).generate_state(n, dtype=np.uint32)] if n else []


def make_generator(seed: int) -> torch.Generator:
    generator = torch.Generator()
    generator.manual_seed(int(seed))
    return generator
