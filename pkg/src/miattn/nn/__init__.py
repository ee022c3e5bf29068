"""Small dense-tensor layer library with hand-written reverse-mode gradients."""
