"""Client-level influence estimation for federated averaging."""
