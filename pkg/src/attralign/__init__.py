"""attralign: classifiers + feature attributions + mask (mis)alignment + robustness stats."""

__version__ = "0.1.0"
