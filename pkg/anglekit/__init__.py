"""AS-OCT angle-closure classification and two-stage scleral-spur localization."""

__version__ = "0.1.0"
