"""Derivation of independent random streams from one u64 run seed.

Each purpose gets its own ``SeedSequence`` spawn key, so e.g. changing the
number of training epochs never perturbs the dataset split, and the
augmentation of a sample depends only on (seed, epoch, record index).
"""
import numpy as np

PURPOSES = {"split": 1, "init": 2, "dropout": 3, "shuffle": 4, "augment": 5}


def derive_rng(seed: int, purpose: str, *keys: int) -> np.random.Generator:
    if purpose not in PURPOSES:
        raise KeyError(f"unknown seed purpose {purpose!r}")
    seq = np.random.SeedSequence(int(seed), spawn_key=(PURPOSES[purpose], *(int(k) for k in keys)))
    return np.random.default_rng(seq)
