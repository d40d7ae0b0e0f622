"""Next-active-object short-term anticipation with object-guided attention."""

__version__ = "0.1.0"
