"""2D multi-vehicle world, LiDAR, scenarios and the privileged expert."""
