"""Multi-agent LLM topic modeling for mixed structured/free-text survey data."""

__version__ = "0.1.0"
