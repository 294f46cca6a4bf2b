"""Three-class micro-CT slice segmentation with learnable filter-bank features.

Library layout:

* ``imagedata`` — grayscale/label IO, manifests, dataset splits
* ``phantom``   — synthetic slice generator with controllable intensity overlap
* ``patches``   — sliding-window extraction, exemplar selection, balanced draws
* ``reprlayer`` — the two discriminative filter banks and their losses
* ``lightunet`` — channel-compressed U-Net and sigmoid cross-entropy
* ``trainer``   — joint optimization, checkpoints, evaluation
* ``metrics``   — per-class F1, error maps, split summaries
* ``figures``   — file-rendered matplotlib reports
* ``cli``       — the ``uctseg`` command
"""

__version__ = "0.1.0"
