"""Semi-supervised sequence learning with recurrent ladder networks."""

__version__ = "0.1.0"
