"""Cross-lingual annotation transfer harness for slot filling and NER."""

__version__ = "0.1.0"
