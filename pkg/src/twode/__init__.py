"""Two-way deconfounder for off-policy evaluation under unmeasured confounding."""

__version__ = "0.1.0"
