"""Test suite for normlab."""
