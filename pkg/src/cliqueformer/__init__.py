"""Cliqueformer: structured transformer surrogates for offline model-based optimization."""
