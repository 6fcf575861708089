"""Data files shipped with carnot_coupling."""
