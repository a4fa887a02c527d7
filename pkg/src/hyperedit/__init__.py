"""Per-step hyperparameter search for iterative denoising edits via PPO."""

__version__ = "0.1.0"
