"""editforge: instruction-editing data pipeline and evaluation workbench."""

__version__ = "0.1.0"
