"""Composite deformable cascade table detector, built on a small numpy autograd."""

__version__ = "0.1.0"
