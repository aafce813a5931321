"""Batch estimation: state layout, residual blocks, solvers and the refinement loop."""
