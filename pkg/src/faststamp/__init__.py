"""Neural image watermarking with a fixed-point, dataflow-simulated encoder."""
__version__ = "0.1.0"
