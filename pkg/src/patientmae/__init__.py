"""Patient-paired masked autoencoder pretraining for fundus photographs."""

__version__ = "0.1.0"
