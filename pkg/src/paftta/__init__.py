"""Open-set test-time adaptation with primary-auxiliary filtering and
knowledge-integrated prediction, on a small numpy MLP."""

__version__ = "0.1.0"
