"""stormlab: a desk-scale unified radar generation + understanding lab."""

__version__ = "0.1.0"
