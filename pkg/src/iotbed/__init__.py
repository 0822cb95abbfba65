"""Deterministic IoT integration testbeds: simulated devices on a virtual
network, test and perf runners, and record/replay of every run."""

__version__ = "0.1.0"
