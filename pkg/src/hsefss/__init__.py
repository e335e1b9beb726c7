"""Few-shot segmentation with class-description embedding fusion, on a small numpy autodiff core."""

__version__ = "0.1.0"
