"""Factor-graph data fusion for power systems.

Combines grid state estimation, smart-meter readings, statistical forecasts
and a physics coupling constraint into one Gaussian posterior over bus
voltages and per-bus demand/solar quantities, via belief propagation with
per-iteration relinearization of non-linear factors.
"""

__version__ = "0.1.0"
