"""Backdoor poisoning attacks on incremental learners, at desk scale."""

__version__ = "0.1.0"
