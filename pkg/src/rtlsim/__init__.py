"""Position solvers and a minute-step simulator for energy-harvesting UWB locating networks."""

__version__ = "0.1.0"
