"""Layer-wise energy modelling of DNN training with Gaussian processes."""

__version__ = "0.1.0"
