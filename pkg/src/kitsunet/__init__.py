"""Multi-scale supervised 3D U-Net for kidney and tumor segmentation."""

__version__ = "0.1.0"
