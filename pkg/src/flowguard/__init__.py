"""Capture, detect and filter: flow metering, flow classifiers and an ingress drop table."""

__version__ = "0.1.0"
