from .model import RawOutputs, ToyDetector, ToyDetectorConfig
from .train import train_toy

__all__ = ["RawOutputs", "ToyDetector", "ToyDetectorConfig", "train_toy"]
