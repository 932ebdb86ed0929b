"""Desk-scale cloze-style question answering.

A multi-hop gated-attention reader with dependent query reading, built
on a small float64 tape-autodiff engine, plus the surrounding tooling:
corpus handling, training, analysis, and a rule-based candidate
disambiguator.
"""

__version__ = "0.1.0"
