"""Single-path neural architecture search on a small numpy autodiff engine."""

__version__ = "0.1.0"
