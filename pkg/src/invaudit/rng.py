"""Named, counter-addressed random substreams.

Every random quantity in a run is addressed by ``(seed, product_id, purpose)``
and a week index. A substream is a Philox generator keyed by the first three;
week ``t`` always reads the ``t``-th draw of that stream, so the value seen at
a given week never depends on how many other draws were consumed elsewhere.
This is what lets counterfactual rollouts share randomness exactly.
"""
from __future__ import annotations

import numpy as np

PURPOSES = {
    "demand": 1,
    "vlt": 2,
    "bandit": 3,
    "explore": 4,
    "schedule": 5,
    "products": 6,
}

# Keeps uniforms strictly inside (0, 1) so inverse-CDF sampling never hits ppf(0).
_HALF_ULP = 2.0 ** -54


def substream(seed: int, product_id: int, purpose: str) -> np.random.Generator:
    if purpose not in PURPOSES:
        raise KeyError(f"unknown stream purpose {purpose!r}")
    ss = np.random.SeedSequence([int(seed), int(product_id), PURPOSES[purpose]])
    return np.random.Generator(np.random.Philox(ss))


def uniforms(seed: int, product_id: int, purpose: str, n: int) -> np.ndarray:
    """The first ``n`` uniforms of a substream; entry ``t`` belongs to week ``t``."""
    return substream(seed, product_id, purpose).random(n) + _HALF_ULP


def derive_seed(master_seed: int, *tags: int | str) -> int:
    """Derive a child seed from a master seed and a path of tags."""
    words = [int(master_seed)]
    for tag in tags:
        if isinstance(tag, str):
            words.extend(tag.encode())
        else:
            words.append(int(tag))
    return int(np.random.SeedSequence(words).generate_state(1, dtype=np.uint64)[0] >> 1)
