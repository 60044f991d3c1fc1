"""Desk-scale training harness on a synthetic paired corpus."""
