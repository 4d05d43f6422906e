"""Training package for the polarimetric noise predictor."""
