"""Two-type logistic branching processes: forward simulation, labelled
genealogies, the ancestral selection graph and the Wright-Fisher diffusion
limit."""

from .kernels import BACKEND

__version__ = "0.1.0"

__all__ = ["BACKEND", "__version__"]
