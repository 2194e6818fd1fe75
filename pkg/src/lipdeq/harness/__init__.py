"""Operational shell: configuration, data, training, checkpoints and the CLI."""
