"""Visual question localized-answering with gated vision-language embedding."""

__version__ = "0.1.0"
