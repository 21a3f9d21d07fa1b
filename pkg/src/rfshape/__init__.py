"""rfshape: orthogonal mmWave radar simulation, CFAR detection, 3D fusion,
trajectory accumulation, dataset synthesis, and point-cloud shape completion."""

__version__ = "0.1.0"
