"""Meta-learned mini-batch risk functionals."""

__version__ = "0.1.0"
