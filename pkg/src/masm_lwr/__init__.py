"""Click-log relevance toolkit: data construction, model, training, serving."""

__version__ = "0.1.0"
