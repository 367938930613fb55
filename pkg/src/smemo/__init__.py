"""Social working-memory trajectory forecaster and synthetic benchmark."""

__version__ = "0.1.0"
