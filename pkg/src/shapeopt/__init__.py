"""Shape calculus and convex shape optimization for Dirichlet problems on polygons."""
__version__ = "0.1.0"
