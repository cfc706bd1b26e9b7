"""Matrix completion by deep factorization with a learnable Laplacian
regularizer, plus numerical verification of its training dynamics."""

__version__ = "0.1.0"
