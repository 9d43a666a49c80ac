"""Complete verification of ReLU networks by branch-and-bound with inferred cutting planes."""
