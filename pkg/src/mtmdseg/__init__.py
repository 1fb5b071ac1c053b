"""Multi-domain segmentation with domain-specific batch norm and contrastive regularization, on a numpy autodiff core."""

__version__ = "0.1.0"
