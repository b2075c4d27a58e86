"""Region-wide IRS channel estimation and passive-reflection design from
power measurements: scene synthesis, channel models, measurement campaigns,
geostatistical grid selection, single-layer NN channel estimation, and
discrete phase optimization with baselines.
"""

__version__ = "0.1.0"
