from .augment import AugmentConfig, augment
from .io import (load_dataset, load_sequence, read_flo, read_image, save_dataset,
                 save_sequence, write_flo, write_image)
from .synth import FrameSequence, SynthConfig, composite, generate_sequence
from .trimap import Trimap, dilate_trimap

__all__ = [
    "AugmentConfig", "FrameSequence", "SynthConfig", "Trimap", "augment", "composite",
    "dilate_trimap", "generate_sequence", "load_dataset", "load_sequence", "read_flo",
    "read_image", "save_dataset", "save_sequence", "write_flo", "write_image",
]
