"""Temporal stabilization and lip-sync evaluation toolkit for talking-face video.

Modules
-------
media_io             PGM/PPM frames, ``.flo`` flow, landmark CSV, embedding JSON
optical_flow         coarse-to-fine Horn-Schunck flow
noise_sensor         flow noise pattern and adaptive temporal filter
structure_controller lip-distance driven embedding refinement
structurist          linear 3D morphable model utilities
metrics              Procrustes disparity, CSLD, PCLD, CPBD
fixtures             seeded synthetic assets
"""

__version__ = "0.1.0"

from .errors import DegenerateInputError, DimensionMismatchError, FormatError, TalkstabError, ValidationError
from .media_io import FlowField, FlowSeries, FrameSequence, LandmarkTrack, RegionMask
from .metrics import CPBDConfig, cpbd, csld, pcld, procrustes_disparity
from .noise_sensor import NoisePatternMap, NoiseSensor, mean_noise_pattern, noise_pattern, stabilize
from .optical_flow import FlowParams, HornSchunckFlow, dense_flow, flow_series
from .structure_controller import StructureController, adjust_embedding, compute_lambda, lip_distance
from .structurist import FaceParams, MorphableModel, ShapeCoefficientEncoder, fit_shape, synthesize

__all__ = [
    "CPBDConfig",
    "DegenerateInputError",
    "DimensionMismatchError",
    "FaceParams",
    "FlowField",
    "FlowParams",
    "FlowSeries",
    "FormatError",
    "FrameSequence",
    "HornSchunckFlow",
    "LandmarkTrack",
    "MorphableModel",
    "NoisePatternMap",
    "NoiseSensor",
    "RegionMask",
    "ShapeCoefficientEncoder",
    "StructureController",
    "TalkstabError",
    "ValidationError",
    "adjust_embedding",
    "compute_lambda",
    "cpbd",
    "csld",
    "dense_flow",
    "fit_shape",
    "flow_series",
    "lip_distance",
    "mean_noise_pattern",
    "noise_pattern",
    "pcld",
    "procrustes_disparity",
    "stabilize",
    "synthesize",
]
