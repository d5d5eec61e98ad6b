"""Signature-based fictitious play for McKean-Vlasov FBSDEs with common noise."""

__version__ = "0.1.0"
