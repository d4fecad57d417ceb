"""Synthetic data, metrics, ablation studies, pipeline orchestration and CLI."""
