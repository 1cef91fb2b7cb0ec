"""Point-cloud transformer pre-training by distilling concept tokens toward frozen teacher prefix embeddings."""
__version__ = "0.1.0"
