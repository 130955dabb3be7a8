"""Re-identification risk and opt-out robustness for actor event logs."""

__version__ = "0.1.0"
