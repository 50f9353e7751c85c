"""Request-only training data pipeline.

Request-level event joining, deduplicated columnar sample storage, jagged
batch construction, reference recommendation-model kernels with an
impression-expanded oracle, and FLOP/byte cost accounting.
"""

__version__ = "0.1.0"
