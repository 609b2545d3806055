"""Online threshold learning under fairness and service-rate constraints in closed-loop environments."""

__version__ = "0.1.0"
