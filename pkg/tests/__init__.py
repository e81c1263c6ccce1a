"""Test package for tbad-synth."""
