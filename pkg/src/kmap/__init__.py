"""KMaP: stateful joint knowledge tracing and next-material prediction with
cluster-based student profiling."""

__version__ = "0.1.0"
