"""Test package for LatentMark."""
