"""geoadapt: sim-to-real adaptation of segmentation via self-supervised depth.

A desk-scale, dependency-light stack: its own autodiff core, pinhole
geometry and view synthesis, the multi-task training objectives, toy
encoder/decoder networks, a procedural two-domain scene generator, a
mixed-batch trainer, and evaluation tooling.
"""

__version__ = "0.1.0"
