"""etecap: a desk-scale end-to-end trainable clip captioning framework."""

__version__ = "0.1.0"
