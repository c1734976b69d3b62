"""Synthetic minority-class oversampling for imbalanced chest X-ray
classification: unpaired translation, bulk synthesis, and a fixed-test-set
sensitivity benchmark."""

__version__ = "0.1.0"
