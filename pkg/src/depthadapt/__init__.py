"""Consistency-regularised domain adaptation for monocular depth."""
