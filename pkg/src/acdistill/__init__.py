"""Adversarial consistency distillation for conditional image translation."""

__version__ = "0.1.0"
