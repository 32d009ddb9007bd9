"""Dual-distribution ensemble MIL with learnable-prompt text distillation."""
__version__ = "0.1.0"
