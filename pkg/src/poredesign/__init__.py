"""Porous microstructure generation, LBM permeability homogenization and
property-aware VAE inverse design."""

__version__ = "0.1.0"
