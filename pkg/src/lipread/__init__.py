"""Lipreading toolkit: appearance features, GMM/DNN-HMM training, WFST decoding
and phoneme/viseme lexicon analysis."""

__version__ = "0.1.0"
