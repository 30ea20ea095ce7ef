"""Synthetic sequences, flow color coding, and image/flow file formats."""

from .fileio import read_flo, read_mask, read_pgm, read_ppm, write_flo, write_pgm, write_ppm
from .flowcodec import decode_flow, default_max_mag, encode_flow
from .synth import (ATTRIBUTES, ObjectSpec, SceneSpec, SequenceDataset, load_sequence, render, sample_scene,
                    synth_generate, verify_sequence, write_sequence)

__all__ = [
    "ATTRIBUTES", "ObjectSpec", "SceneSpec", "SequenceDataset", "decode_flow", "default_max_mag", "encode_flow",
    "load_sequence", "read_flo", "read_mask", "read_pgm", "read_ppm", "render", "sample_scene", "synth_generate",
    "verify_sequence", "write_flo", "write_pgm", "write_ppm", "write_sequence",
]
