"""Greedy reduced-basis construction of controls for parametrised linear ODE systems."""
__version__ = "0.1.0"
