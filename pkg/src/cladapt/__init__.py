"""Sequential-task training for toy CTC/attention transducers with task adapters."""

__version__ = "0.1.0"
