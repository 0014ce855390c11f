"""Dual-sequence LSTM speech emotion recognition on a from-scratch numpy autodiff core."""

__version__ = "0.1.0"
