"""Training framework for online distillation with feature fusion and self-distillation."""
