"""Training-free lifting of 2D open-vocabulary perception into labeled 3D instances."""

__version__ = "0.1.0"
