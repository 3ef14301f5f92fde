"""Compare co-speech gestures generated natively in 3D with gestures generated in 2D and lifted."""

__version__ = "0.1.0"
