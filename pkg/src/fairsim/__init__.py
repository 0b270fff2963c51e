"""Discrete-event simulator of Reno/SACK TCP and ensemble (shared-state) congestion
control carrying a multi-connection iSCSI-style session."""

__version__ = "0.1.0"
