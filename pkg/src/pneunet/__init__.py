"""PneuNet: pneumonia prediction and region highlighting from chest X-rays."""

__version__ = "0.1.0"
