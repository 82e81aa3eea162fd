"""Static-scene prior mining from time-shifted image pairs."""

from .matching import Match, MatchConfig, dense_match, read_matches, to_gray, write_matches
from .superpixels import SuperpixelMap, superpixels
from .staticmask import PriorMask, extract_static_prior, refine_pseudo_labels, static_class_ids

__all__ = [
    "Match", "MatchConfig", "dense_match", "read_matches", "to_gray", "write_matches",
    "SuperpixelMap", "superpixels",
    "PriorMask", "extract_static_prior", "refine_pseudo_labels", "static_class_ids",
]
