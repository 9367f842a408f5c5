"""Resolution-adaptive federated learning simulator for heatmap regression."""

__version__ = "0.1.0"
