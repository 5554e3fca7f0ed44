"""Command line front end: config parsing, checkpoints and experiment commands."""
