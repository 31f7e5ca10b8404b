"""End-to-end network: preprocessed frame -> (position, orientation)."""

import torch
import torch.nn as nn

from thermoloc.backbone import Backbone
from thermoloc.head import PoseRegressor

# maps 8-bit intensities to roughly zero mean, unit scale
INPUT_MEAN = 127.5
INPUT_SCALE = 64.0


class ThermalLocNet(nn.Module):
    def __init__(self, backbone_cfg, dropout=0.0):
        super().__init__()
        self.cfg = backbone_cfg
        self.backbone = Backbone(backbone_cfg, dropout=dropout)
        self.head = PoseRegressor(backbone_cfg.d_model, dropout=dropout)

    def describe(self):
        return self.backbone.describe() + [("head", (3 + 4,))]

    def forward(self, frames):
        """``frames``: ``(B, 1, H, W)`` with intensities in [0, 255]."""
        x = (frames - INPUT_MEAN) / INPUT_SCALE
        return self.head(self.backbone(x))


def import_weights(model, state_dict, prefix="backbone.local."):
    """Copy matching tensors from an external state dict into ``model``.

    Keys are matched after prepending ``prefix``; entries whose name or shape
    does not match are skipped. Returns the list of imported parameter names.
    """
    own = model.state_dict()
    imported = []
    with torch.no_grad():
        for key, value in state_dict.items():
            name = prefix + key
            if name in own and own[name].shape == value.shape:
                own[name].copy_(value)
                imported.append(name)
    return imported
