"""Anti-drift training and distillation for autoregressive latent world models."""
