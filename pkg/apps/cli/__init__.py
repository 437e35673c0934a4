"""The ``flowlab`` command line."""
