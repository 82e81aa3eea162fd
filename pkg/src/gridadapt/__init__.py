"""gridadapt: adapt a road-scene segmenter to an unlabeled city.

Grid-level adversarial alignment (global and per-class) plus a static-scene
prior mined from time-shifted image pairs, on top of a small self-contained
tensor engine. See the README for the CLI workflow.
"""

__version__ = "0.1.0"
