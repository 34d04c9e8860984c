"""Network toolkits."""
