"""Static figures for lveval harness outputs.

Reads the harness's CSV/DOT files and renders matplotlib figures: the
theory-vs-MC curve panels, metric scatter summaries, cross-decoding
heatmaps, and state-graph drawings.  Inputs are never modified.
"""

__version__ = "0.1.0"
