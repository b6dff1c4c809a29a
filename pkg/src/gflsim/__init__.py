"""Graph federated learning simulator: APPNP over a client graph with hidden-representation sharing."""

__version__ = "0.1.0"
