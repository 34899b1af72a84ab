"""Natural indirect effect estimation robust to unmeasured confounding and mediator measurement error."""

__version__ = "0.1.0"
