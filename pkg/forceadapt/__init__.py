"""Force-adaptive dual-agent RL for desk-scale humanoid loco-manipulation."""

__version__ = "0.1.0"
