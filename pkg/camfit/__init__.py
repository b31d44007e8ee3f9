"""
camfit - Camera trajectory, focal length and motion uncertainty from depth and optical flow
"""

__version__ = "0.1.0"
__author__ = "camfit Team"
