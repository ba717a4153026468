"""Two-tower multi-modal product retrieval trained with a pairwise hinge rank loss."""

__version__ = "0.1.0"
