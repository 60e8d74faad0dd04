"""Simulator modules; each is imported by file name from this directory."""
