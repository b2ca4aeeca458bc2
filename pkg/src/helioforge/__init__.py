"""Multi-site solar nowcasting lab: numpy autodiff, SUNSET-style CNN, data
pipeline, synthetic sites, transfer-learning trainers and reports."""

__version__ = "0.1.0"
