"""Synthetic scenes, training loops, analyses and the command-line front end."""
