from .augment import AugmentationConfig, augment
from .io import (SampleRecord, image_to_chw, load_dataset, load_pool, read_image, read_mask,
                 write_image, write_manifest, write_mask)
from .synth import SynthConfig, generate_synthetic
from .triplets import HardNegativePool, Triplet, TripletSampler, build_triplets

__all__ = [
    "AugmentationConfig", "HardNegativePool", "SampleRecord", "SynthConfig", "Triplet",
    "TripletSampler", "augment", "build_triplets", "generate_synthetic", "image_to_chw",
    "load_dataset", "load_pool", "read_image", "read_mask", "write_image", "write_manifest",
    "write_mask",
]
