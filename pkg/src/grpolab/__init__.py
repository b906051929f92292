"""Desk-scale laboratory for group-relative policy optimization of seq2seq
transduction policies with a reference-free hybrid reward."""

__version__ = "0.1.0"
