"""Taxi destination prediction from rasterized GPS trajectories.

The pipeline: parse trip records, cluster historical destinations into
candidate centers, rasterize trajectory prefixes into small images, run
them through a from-scratch convolutional network whose output head mixes
the candidate centers, and evaluate predictions by great-circle distance.
"""

from trajcast.geo import GeoPoint, Grid, CellIndex, haversine_m

__version__ = "0.1.0"

__all__ = ["GeoPoint", "Grid", "CellIndex", "haversine_m", "__version__"]
