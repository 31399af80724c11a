"""Token-walk decentralized learning: I-BCD, API-BCD, gAPI-BCD and WPG on a simulated network."""

__version__ = "0.1.0"
