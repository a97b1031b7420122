"""Stochastic super-resolution of time-evolving 2-D fields.

Trains a recurrent conditional GAN that turns low-resolution field sequences
into ensembles of plausible high-resolution sequences, verifies the ensembles
with rank statistics and probabilistic scores, and compares against classical
baselines.
"""

from .transforms import TransformSpec, forward_transform, inverse_transform
from .fields import FieldSequence, SequencePair, make_pair, augment
from .synthetic import SyntheticParams, synth_sequence
from .archive import DatasetManifest, read_archive, write_archive, split_dataset

__all__ = [
    "TransformSpec",
    "forward_transform",
    "inverse_transform",
    "FieldSequence",
    "SequencePair",
    "make_pair",
    "augment",
    "SyntheticParams",
    "synth_sequence",
    "DatasetManifest",
    "read_archive",
    "write_archive",
    "split_dataset",
]

__version__ = "0.1.0"
