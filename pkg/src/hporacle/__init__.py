"""hp-adaptive finite elements on the L-shape with a neural refinement oracle."""

__version__ = "0.1.0"
