"""Unit tests for tbad-synth."""
