"""Physics-informed low-rank adaptation and hypernetworks for parameterized PDEs."""

__version__ = "0.1.0"
