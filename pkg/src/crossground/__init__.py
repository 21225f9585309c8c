"""Cross-dataset 3D visual grounding: engine and benchmark harness."""

__version__ = "0.1.0"
