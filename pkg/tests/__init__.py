"""Test package for longevity-risk."""
