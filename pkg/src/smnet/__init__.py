"""Shape-morphing inverse model: point cloud in, actuator control vector out."""

__version__ = "0.1.0"
