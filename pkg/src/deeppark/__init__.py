"""deeppark: a self-contained simulator, trainer, and evaluator for a
deep-RL parking-lot vehicle controller."""

from ._mem import tune_malloc

tune_malloc()

__version__ = "0.1.0"
