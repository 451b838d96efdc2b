"""EMG-to-hand-kinematics regression: kinematic model, signal pipeline, recursive per-joint networks."""
from importlib.metadata import PackageNotFoundError, version

try:
    __version__ = version("artifact")
except PackageNotFoundError:  # running from a source tree
    __version__ = "0.1.0"
