"""Cooperative driving over a simulated V2V link.

Point Transformer encoders turn each vehicle's LiDAR scan into a compact
keypoint message; the ego fuses received messages and imitates a
privileged expert through behaviour cloning and DAgger.
"""

__version__ = "0.1.0"
