"""Integration tests for tbad-synth."""
