"""Car-part recognition and detection toolkit: autodiff CNNs, grid detection, evaluation."""

__version__ = "0.1.0"
