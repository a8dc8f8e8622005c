"""Speech pre-training with adversarial phoneme targets and k-means codes, in numpy."""

__version__ = "0.1.0"
