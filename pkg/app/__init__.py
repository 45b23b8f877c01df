"""Cloud K-SVD: collaborative dictionary learning over a simulated network."""

__version__ = "0.1.0"
