"""Configuration, checkpoints, stage pipelines and the command-line interface."""
