"""Semi-supervised segmentation by consistency under elastic deformations.

Desk-scale training engine: a minimal reverse-mode autodiff core, dense
elastic deformation fields, a differentiable nearest-neighbour warp layer
with an exact scatter-add adjoint, soft-IOU losses, a small U-Net, and a
Siamese two-branch training loop with four regimes (baseline, SupTC,
SemiTC, SemiTC+).
"""

__version__ = "0.1.0"
