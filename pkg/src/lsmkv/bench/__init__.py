"""Workload driver, crash-injection harness, and benchmark CLI."""
