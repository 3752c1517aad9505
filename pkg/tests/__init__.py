"""Tests for the parallel-cpt toolkit."""
