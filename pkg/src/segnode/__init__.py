"""SegNode: multi-resolution neural-ODE semantic segmentation in numpy."""
__version__ = "0.1.0"
