"""Desk-scale workbench for learned KV-cache forgetting under proactive interference."""

__version__ = "0.1.0"
