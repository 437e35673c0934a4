"""flowlab core: domain models, pydantic schemas and the numerical services."""

__version__ = "0.1.0"
