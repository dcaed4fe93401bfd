"""Packaged data files: the committed calibration thresholds."""
