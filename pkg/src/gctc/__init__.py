"""Gray-box computed-torque tracking control for a differential-drive robot."""

__version__ = "0.1.0"
