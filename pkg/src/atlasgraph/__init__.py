"""Neural atlas graphs: layered plane-based video decomposition and editing."""
__version__ = "0.1.0"
