"""Plant/PLC/historian/twin testbed with attack scenarios, detection and navigation."""

__version__ = "0.1.0"
