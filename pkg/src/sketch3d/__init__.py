"""3D sketch abstraction: optimize Bezier curves and superquadric contours
against multi-view images, render view-consistent sketches."""

__version__ = "0.1.0"
