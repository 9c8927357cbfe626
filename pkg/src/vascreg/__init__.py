"""Coarse-to-fine 2D/3D vessel registration.

A structure-aware PnP solve aligns the 3D centerline tree to each X-ray frame;
a conditional diffusion model then refines every branch non-rigidly using a
short window of consecutive frames.
"""

__version__ = "0.1.0"
