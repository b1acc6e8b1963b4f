"""Test package; keeps conftest and helpers importable under one module path."""
