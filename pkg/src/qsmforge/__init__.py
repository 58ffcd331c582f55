"""qsmforge: QSM dipole inversion toolkit with a toy-scale 3D GAN."""
__version__ = "0.1.0"
