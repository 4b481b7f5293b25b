"""Label free-text radiology reports with LLM endpoints and evaluate the results."""

__version__ = "0.1.0"
