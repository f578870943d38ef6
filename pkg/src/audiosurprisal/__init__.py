"""Musical surprisal from continuous latent audio frames."""

__version__ = "0.1.0"
