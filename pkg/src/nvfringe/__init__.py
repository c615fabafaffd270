"""Resonance-tracking NV scanning magnetometry simulator and TPS field reconstruction."""

__version__ = "0.1.0"

from nvfringe.grid import ScalarGrid
from nvfringe.field import DipoleSource, NvFrame
from nvfringe.odmr import LineShape, SpectrumFit, FitError
from nvfringe.tracker import ScanParams, ScanRecord, TrackingLoss
from nvfringe.tps import TpsModel, FitConfig, FitData
from nvfringe.pipeline import ExperimentConfig, DeviationReport, run_simulation

__all__ = [
    "ScalarGrid",
    "DipoleSource",
    "NvFrame",
    "LineShape",
    "SpectrumFit",
    "FitError",
    "ScanParams",
    "ScanRecord",
    "TrackingLoss",
    "TpsModel",
    "FitConfig",
    "FitData",
    "ExperimentConfig",
    "DeviationReport",
    "run_simulation",
]
