"""Evaluation toolkit for latent-variable models of spiking data.

Generates synthetic data from HMM and linear-Gaussian teachers, fits
student models, scores them with co-smoothing and few-shot co-smoothing,
compares latent spaces by cross-decoding and cycle consistency, and
checks the closed-form few-shot theory against Monte Carlo.
"""

__version__ = "0.1.0"
