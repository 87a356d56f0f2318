"""
LIDAR-EPW Core Package
======================

Sensor geometry, scene simulation, grid encoding, EPW models, echo
selection and evaluation.
"""

from .echo_select import SelectionConfig, SelectionMode, SensorModel, apply_model, fit_echo_hist, select_echoes
from .evaluation import KpiReport, full_report
from .frames import DenseFrame, DenseSample, ScanFrame, ScanPoint
from .lut_model import EpwLut, LutBins, QueryMode, fit_lut, query_lut
from .pgm import PolarGridMap, decode, encode
from .scene import DatasetConfig, SceneConfig, build_scene, cast_rays, make_dataset, reference_epw
from .sensor import ClassLabel, SensorSpec, angle_to_cell, cell_to_angle

__all__ = [
    "ClassLabel",
    "SensorSpec",
    "angle_to_cell",
    "cell_to_angle",
    "DenseSample",
    "DenseFrame",
    "ScanPoint",
    "ScanFrame",
    "SceneConfig",
    "DatasetConfig",
    "build_scene",
    "cast_rays",
    "reference_epw",
    "make_dataset",
    "PolarGridMap",
    "encode",
    "decode",
    "LutBins",
    "EpwLut",
    "QueryMode",
    "fit_lut",
    "query_lut",
    "SelectionMode",
    "SelectionConfig",
    "SensorModel",
    "fit_echo_hist",
    "select_echoes",
    "apply_model",
    "KpiReport",
    "full_report",
]
