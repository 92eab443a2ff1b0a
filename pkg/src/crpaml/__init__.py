"""crpaml: context-risk-predict money laundering detection pipeline."""

__version__ = "0.1.0"
