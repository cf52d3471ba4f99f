"""Dataset generators and the three benchmark experiments."""
