"""Mean-field particle laboratory: ensembles, limit PDEs, Gibbs equilibria, cumulants."""

__version__ = "0.1.0"
