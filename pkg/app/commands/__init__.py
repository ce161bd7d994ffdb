"""
CLI command packages.

Each module exposes `register(subparsers)`, which adds its subcommand and
binds a `run(args) -> int` handler.
"""
