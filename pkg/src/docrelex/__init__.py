"""Desk-scale document-level relation extraction.

A numpy library for training and dissecting a relation-extraction model with
representation-level augmentation of low-frequency relations and
momentum-contrast pretraining, built so every mechanism can be verified by
oracle equivalence, invariants, and finite-difference gradient checks.
"""

__version__ = "0.1.0"
