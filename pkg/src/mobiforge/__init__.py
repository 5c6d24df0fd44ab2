"""mobiforge: cross-city human mobility synthesis and auditing."""

__version__ = "0.1.0"
