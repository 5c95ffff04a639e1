"""Adversarial observation attacks on demand-response battery controllers."""
