"""High-order Plackett-Luce rank losses, transition heads, gated fusion and
structural distillation, with enumeration and finite-difference oracles."""

__version__ = "0.1.0"
