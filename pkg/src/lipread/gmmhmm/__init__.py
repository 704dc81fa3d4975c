"""GMM-HMM acoustic models and staged training."""
