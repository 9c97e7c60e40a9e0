"""Audio- and blink-conditioned tri-plane radiance fields for talking heads,
with keypoint-driven face replacement and a scaling benchmark."""

from .conditioning import AudioTrack, featurize_audio, read_feature_file, write_feature_file
from .errors import TalkfieldError
from .facerep import extract_motion, replace_face, transform_keypoints
from .field import HeadModel
from .formats import Checkpoint, load_checkpoint, save_checkpoint
from .renderer import Camera, Frame, render_frame
from .triplane import TriPlaneGrid

__all__ = [
    "AudioTrack",
    "Camera",
    "Checkpoint",
    "Frame",
    "HeadModel",
    "TalkfieldError",
    "TriPlaneGrid",
    "extract_motion",
    "featurize_audio",
    "load_checkpoint",
    "read_feature_file",
    "render_frame",
    "replace_face",
    "save_checkpoint",
    "transform_keypoints",
    "write_feature_file",
]
