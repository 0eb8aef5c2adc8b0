"""
Benchmarking package for contextgate.

This package contains benchmarks that measure the cost of the attention blocks and the
classifier training step.
"""
