"""Torch training for vesseltrack models.

This package is intentionally independent of vesseltrack's Python API: it
reads ADS sample files and writes AWT weight files from their documented
byte layouts, and integration tests drive the `vesseltrack` command line.
Keeping the boundary at the file formats means either side can change
internals freely as long as the formats hold.
"""

__version__ = "0.1.0"
