"""Model averaging for linear ODE systems discretised by RK4."""

__version__ = "0.1.0"
