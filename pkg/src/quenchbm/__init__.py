"""Exact desk-scale simulator and training harness for quantum Boltzmann
machines whose thermal statistics are produced by quenching a paired
model/thermometer register and reading temperature off the thermometer."""

__version__ = "0.1.0"
