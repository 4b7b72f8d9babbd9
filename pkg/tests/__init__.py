"""Test suite for the adapter unlearning package."""
