"""Relation alignment on synthetic scene graphs.

Thin wrappers over the C++ core; configs and results are plain dicts.
"""

import json

from . import _relalign
from ._relalign import (
    Bundle,
    DataError,
    UnsupportedModeError,
    combine_losses,
    kl_alignment_grad,
    kl_alignment_loss,
    mask_attention_logits,
    mask_rows,
)

__all__ = [
    "Bundle",
    "DataError",
    "UnsupportedModeError",
    "builtin_grid",
    "combine_losses",
    "evaluate_checkpoint",
    "kl_alignment_grad",
    "kl_alignment_loss",
    "load_corpus",
    "make_bundle",
    "mask_attention_logits",
    "mask_rows",
    "run_ablation",
    "sample",
    "spec",
    "train",
]


def make_bundle(**spec):
    """Generates a corpus; keyword arguments are CorpusSpec fields (n_train=..., seed=...)."""
    return _relalign.make_bundle(json.dumps(spec))


def load_corpus(path):
    return _relalign.load_corpus(str(path))


def spec(bundle):
    return json.loads(bundle.spec_json)


def sample(bundle, split, index):
    return json.loads(bundle.sample_json(split, index))


def train(config, bundle, out=None):
    """Runs one training job. `config` uses TrainConfig JSON keys; returns the run record."""
    return json.loads(_relalign.train(json.dumps(config), bundle, None if out is None else str(out)))


def evaluate_checkpoint(path, bundle, split="test", ks=(20, 50, 100), mode=None):
    return json.loads(_relalign.evaluate_checkpoint(str(path), bundle, split, list(ks), mode))


def builtin_grid(name):
    return json.loads(_relalign.builtin_grid_json(name))


def run_ablation(grid, bundle, out=None):
    return json.loads(_relalign.run_ablation(json.dumps(grid), bundle, None if out is None else str(out)))
