"""Physics-informed recurrent modelling of seeded batch cooling crystallization."""

__version__ = "0.1.0"
