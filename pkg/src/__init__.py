"""Mean-field toolkit for block-structured Markov processes."""
