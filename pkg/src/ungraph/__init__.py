"""Graph generation with trainable unpooling layers."""

from .graph import FeaturedGraph, GraphError, NodeMap

__all__ = ["FeaturedGraph", "GraphError", "NodeMap"]
__version__ = "0.1.0"
