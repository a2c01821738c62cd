"""Self-supervised recurrent occupancy-grid tracking from 2D range scans."""

__version__ = "0.1.0"
