"""Test suite for the few-shot segmentation package."""
