"""diffcompose: zero-shot image composition under a frozen diffusion prior.

Optimizes a latent image with guidance-difference gradients to remove
objects, harmonize pasted content, and steer composition semantics, with
deterministic analytic and toy-attention backends for exact testing.
"""

__version__ = "0.1.0"
