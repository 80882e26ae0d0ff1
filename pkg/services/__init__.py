"""Service layer for ctxcrf."""

from .dataset import DatasetService
from .rescore import RescoreService
from .training import TrainingService

__all__ = ("DatasetService", "RescoreService", "TrainingService")
