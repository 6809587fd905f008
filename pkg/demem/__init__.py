"""demem - De-memorizing conditional flow-matching models with learnable masks."""

__version__ = "0.1.0"
