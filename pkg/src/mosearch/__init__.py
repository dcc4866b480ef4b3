"""Multi-object search at desk scale: procedural floorplans, a diff-drive
simulator with semantic mapping, and PPO agents with a direction-prediction
auxiliary task."""

__version__ = "0.1.0"
