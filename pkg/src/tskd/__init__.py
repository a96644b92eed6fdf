"""Task-specific knowledge distillation on procedurally generated tasks."""

__version__ = "0.1.0"
