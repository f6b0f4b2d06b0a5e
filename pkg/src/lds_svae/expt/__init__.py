"""Datasets, metrics, benchmarks, experiment orchestration, and the CLI."""
