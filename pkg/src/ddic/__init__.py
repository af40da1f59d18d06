"""Unpaired diffusion image translation: DDIB bridge and correlation-guided DDIC."""

__version__ = "0.1.0"
