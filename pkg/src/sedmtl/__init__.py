"""Polyphonic sound event detection trained jointly with scene classification.

The package provides a small float64 autodiff core (`autodiff`), log mel-band
feature extraction (`features`), TUT-style dataset ingestion (`data`), the
teacher/student network definitions (`networks`), the task objectives
(`losses`), the two-stage training pipeline (`training`), segment-based
metrics (`evaluation`), and a command line front end (`cli`).
"""

__version__ = "0.1.0"
