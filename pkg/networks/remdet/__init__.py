"""RemDet building blocks: tensors, blocks, reparameterization, cost analysis."""
