"""Risk dynamics of spectral optimizers (SignSVD, Muon) and SignSGD on matrix-valued linear regression."""

__version__ = "0.1.0"
