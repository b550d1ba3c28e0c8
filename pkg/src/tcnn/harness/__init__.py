"""Dataset synthesis, splits, training, evaluation, reporting and the command line."""
