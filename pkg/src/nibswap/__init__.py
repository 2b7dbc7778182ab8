"""Dynamic updates for SDN controller applications by state transfer."""

__version__ = "0.1.0"
