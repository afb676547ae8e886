"""Continuous normalizing flows trained by maximum likelihood, conditional flow
matching, or interpolant-free dual flow matching, with NLL-based anomaly scoring."""

__version__ = "0.1.0"
