"""planlab: a desk-scale lab for learned query planning in a simulated DBMS."""

__version__ = "0.1.0"
