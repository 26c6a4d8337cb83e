"""Autoregressive 3D object detection as box-token sequence generation."""
from .geometry import Box3D, iou_3d, iou_bev
from .tokenizer import VocabLayout, decode_scene, encode_scene
from .model import ModelConfig, init_params
from .decoding import DecodeConfig, detect
from .evaluation import MatchConfig, evaluate

__version__ = "0.1.0"
