"""Bayesian multi-atlas label fusion by variational EM."""

from .atlas import Atlas, AtlasSet, LabelTable, label_table, load_manifest, select_by_age, select_by_mi
from .intensity import BiasModel, LabelMixture, apply_bias, correct_bias
from .metrics import dice, generalized_dice, report, tenengrad
from .vem import SegmentationResult, VemConfig, run_vem
from .volume import GridMeta, LabelVolume, ScalarVolume, read_volume, resample_isotropic, write_volume

__version__ = "0.1.0"

__all__ = [
    "Atlas", "AtlasSet", "LabelTable", "label_table", "load_manifest", "select_by_age", "select_by_mi",
    "BiasModel", "LabelMixture", "apply_bias", "correct_bias",
    "dice", "generalized_dice", "report", "tenengrad",
    "SegmentationResult", "VemConfig", "run_vem",
    "GridMeta", "LabelVolume", "ScalarVolume", "read_volume", "resample_isotropic", "write_volume",
]
