"""Queueing analysis and simulation of asynchronous federated SGD."""

__version__ = "0.1.0"
