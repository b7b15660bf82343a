"""Per-instance privacy losses as a measure of unlearning difficulty, at desk scale."""

__version__ = "0.1.0"
