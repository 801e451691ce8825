"""Stage-keyed seed derivation.

Every stochastic stage of a run draws its seed from the master seed and a
stage name: ``derive_seed(master, "classifier/baseline")``.  The derivation
is the first 8 bytes of ``sha256(f"{master}:{stage}")`` read as a big-endian
integer and masked to 63 bits, so any stage can be reproduced on its own.
"""

import hashlib

import numpy as np
import torch


def derive_seed(master: int, stage: str) -> int:
    digest = hashlib.sha256(f"{int(master)}:{stage}".encode()).digest()
    return int.from_bytes(digest[:8], "big") & ((1 << 63) - 1)


def numpy_rng(master: int, stage: str) -> np.random.Generator:
    return np.random.default_rng(derive_seed(master, stage))


def torch_generator(seed: int) -> torch.Generator:
    g = torch.Generator()
    g.manual_seed(int(seed))
    return g
