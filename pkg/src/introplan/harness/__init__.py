"""Command-line harness: KB building, calibration, evaluation and sweeps."""
