"""VOneBlock-style V1 front-end with biological vs. uniform RF sampling,
a small trainable backend, corruption robustness evaluation and
neuronal-representation analysis."""

__version__ = "0.1.0"
