"""Language-guided visual-token pruning with a learned RL policy, at desk scale."""

__version__ = "0.1.0"
