# Numerics, encoders, prompt pool, training and data generation
__version__ = "0.1.0"
