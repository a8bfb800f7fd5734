"""Tests for the ragglom package."""
