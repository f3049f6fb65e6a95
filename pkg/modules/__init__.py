"""meltsim library modules."""
