"""Adversarial reprogramming of sequence classifiers."""
