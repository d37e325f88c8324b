# Test package