"""Test suite for the ADMM compression toolkit."""
