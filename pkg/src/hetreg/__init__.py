"""Deformable registration with collaborative heteroscedastic uncertainty."""
