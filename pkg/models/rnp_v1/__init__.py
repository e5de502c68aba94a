"""
RNPx model package: latent-variable neural processes trained with
pluggable VI, maximum-likelihood and Renyi-divergence objectives.
"""

__version__ = "1.0.0"
