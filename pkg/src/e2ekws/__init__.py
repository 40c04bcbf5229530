"""Keyword spotting with a DNN-HMM trained end to end through Viterbi window scoring."""

__version__ = "0.1.0"
