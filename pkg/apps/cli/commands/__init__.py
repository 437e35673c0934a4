"""Sub-commands of the ``flowlab`` CLI; each exposes ``register(subparsers, common)``."""
