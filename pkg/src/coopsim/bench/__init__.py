"""Metrics, benchmark protocol, reports and rendering."""
