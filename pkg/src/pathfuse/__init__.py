"""Gated Kronecker fusion of histology images, cell graphs and genomics for survival and grade."""

from .numcore import ParamStore, rng_stream
from .synthio import Cohort, SynthSpec, load_cohort, split_folds, synth_generate

__version__ = "0.1.0"

__all__ = [
    "Cohort",
    "ParamStore",
    "SynthSpec",
    "load_cohort",
    "rng_stream",
    "split_folds",
    "synth_generate",
]
