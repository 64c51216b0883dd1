"""Two-tower contrastive pretraining with prototypical cross-modal supervision."""

__version__ = "0.1.0"
