"""Label class-agnostic 3D instance masks from rendered scene views.

The pipeline renders a colored point cloud from calibrated virtual cameras,
hands the images to a pluggable 2D open-vocabulary detector, and projects the
detections back onto the 3D masks to assign category names.
"""

__version__ = "0.1.0"
