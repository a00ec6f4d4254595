"""resteer: concept forgetting by attention resteering in a small diffusion model"""

__version__ = "0.1.0"
