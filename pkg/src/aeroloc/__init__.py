"""Metric cross-view localization on aerial feature maps."""
