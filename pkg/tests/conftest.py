"""Shared fixtures: a tiny synthetic corpus and finite-difference helpers."""

import numpy as np
import pytest

from needlenet.synth import SynthConfig, generate_corpus
from needlenet.data import load_dataset


TINY_CONFIG = SynthConfig(
    seed=123,
    clips_per_section=4,
    infil_fraction=3 / 4,
    width=160,
    height=120,
    no_needle_frames=(4, 6),
    fist_frames=(4, 6),
    infil_frames=(4, 6),
    transition_ramp=2,
    nonfil_holdout=0,
)


@pytest.fixture(scope="session")
def tiny_corpus_dir(tmp_path_factory):
    root = tmp_path_factory.mktemp("tiny_corpus")
    generate_corpus(TINY_CONFIG, root)
    return root


@pytest.fixture(scope="session")
def tiny_split(tiny_corpus_dir):
    return load_dataset(tiny_corpus_dir)


def numeric_grad(f, x, eps=1e-6):
    """Central finite-difference gradient of scalar f wrt array x (float64)."""
    x = np.asarray(x, dtype=np.float64)
    g = np.zeros_like(x)
    flat = x.reshape(-1)
    gflat = g.reshape(-1)
    for i in range(flat.size):
        orig = flat[i]
        flat[i] = orig + eps
        hi = f(x)
        flat[i] = orig - eps
        lo = f(x)
        flat[i] = orig
        gflat[i] = (hi - lo) / (2 * eps)
    return g


def rel_error(a, b):
    a = np.asarray(a, dtype=np.float64)
    b = np.asarray(b, dtype=np.float64)
    denom = max(np.abs(a).max(), np.abs(b).max(), 1e-12)
    return np.abs(a - b).max() / denom
