"""Energy-pooling texture CNN, preprocessing and handcrafted baselines for pipe-wall corrosion images."""

__version__ = "0.1.0"

CLASSES = ("ND", "MC", "AC")
