"""Dynamic calibration of differentiable crop models with recurrent networks."""

__version__ = "0.1.0"
