"""Three-phase distribution feeder toolkit: power flow, PMU placement,
zone-parallel state estimation, UPFC compensation and ANFIS control."""

__version__ = "0.1.0"
