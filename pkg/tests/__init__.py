# Test package for ctxcrf.
