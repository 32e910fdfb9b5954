"""Unpaired CT to Micro-CT super-resolution pipeline with uncertainty and rating tools."""

__version__ = "0.1.0"
