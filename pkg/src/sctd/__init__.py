"""Token-dropping MLM pretraining with semantic-consistent learning."""

__version__ = "0.1.0"
