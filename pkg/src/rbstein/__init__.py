"""Thompson sampling for restless bandits with partially observed, k-step unlabeled arms."""

__version__ = "0.1.0"
