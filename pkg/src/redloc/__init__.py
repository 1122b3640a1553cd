"""Anchor-free cooperative UWB localization with byzantine-node detection."""
