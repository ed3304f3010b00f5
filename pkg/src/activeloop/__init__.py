"""Active learning for 3D object detection: query strategies, episodic loop, surrogate detector."""

__version__ = "0.1.0"
