"""Battery state-of-health estimation from incremental-capacity features with a Gaussian process."""

__version__ = "0.1.0"
