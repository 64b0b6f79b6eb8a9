"""Discrete-event simulator for IO-Link Wireless Safety roaming."""

__version__ = "0.1.0"
