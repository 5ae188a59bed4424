"""Tiny quantized adversarial-input detector for edge devices.

Layer-wise energy-separation training, percentile-calibrated early exit,
a gradient-attack suite and an analytic accelerator energy model.
"""
__version__ = "0.1.0"
