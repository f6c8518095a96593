"""Local-geometry descriptors and rotary attention for rigid point cloud registration."""

from .geometry import RigidTransform
from .model import ModelConfig, RegistrationNet, load_model, save_model
from .pipeline import register, run_benchmark

__all__ = ["ModelConfig", "RegistrationNet", "RigidTransform", "load_model", "register", "run_benchmark", "save_model"]
__version__ = "0.1.0"
