"""Visual probing of image representations: superpixels, visual words, probing tasks."""
__version__ = "0.1.0"
