"""Multitask supernet search on a path-by-stage block grid."""

__version__ = "0.1.0"
