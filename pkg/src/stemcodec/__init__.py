"""stemcodec: residual-vector-quantized audio codec for stem separation."""

__version__ = "0.1.0"
