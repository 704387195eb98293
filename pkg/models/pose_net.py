from typing import Sequence

import numpy as np
import torch
import torch.nn as nn

from control.errors import RejectedInputError


def _conv_bn_relu(cin: int, cout: int, stride: int = 1) -> list:
    return [nn.Conv2d(cin, cout, 3, stride=stride, padding=1, bias=False),
            nn.BatchNorm2d(cout),
            nn.ReLU(inplace=True)]


class PoseNetwork(nn.Module):
    """
    Strided conv encoder + upsampling decoder heatmap regressor.
    - encoder: one stride-2 block per entry of encoder_channels (256 px -> 8 px with five)
    - decoder: one x2 bilinear upsample + conv per entry of decoder_channels (8 -> 64)
    - head: 1x1 conv to one channel per joint, raw (unclamped) output
    """

    def __init__(self, num_joints: int, image_size: int = 256, heatmap_size: int = 64,
                 encoder_channels: Sequence[int] = (16, 32, 64, 128, 256),
                 decoder_channels: Sequence[int] = (128, 64, 64)):
        super().__init__()
        down = 2 ** len(encoder_channels)
        up = 2 ** len(decoder_channels)
        if image_size % down != 0 or image_size // down * up != heatmap_size:
            raise RejectedInputError(
                f"{len(encoder_channels)} down / {len(decoder_channels)} up stages cannot map "
                f"{image_size} px to a {heatmap_size} grid")

        self.num_joints = num_joints
        self.image_size = image_size
        self.heatmap_size = heatmap_size
        self.encoder_channels = list(encoder_channels)
        self.decoder_channels = list(decoder_channels)

        layers, cin = [], 3
        for cout in encoder_channels:
            layers += _conv_bn_relu(cin, cout, stride=2) + _conv_bn_relu(cout, cout)
            cin = cout
        self.encoder = nn.Sequential(*layers)

        layers = []
        for cout in decoder_channels:
            layers += [nn.Upsample(scale_factor=2, mode="bilinear", align_corners=False)]
            layers += _conv_bn_relu(cin, cout)
            cin = cout
        self.decoder = nn.Sequential(*layers)
        self.head = nn.Conv2d(cin, num_joints, 1)

    def architecture(self) -> dict:
        """Everything needed to rebuild an identical network."""
        return {"num_joints": self.num_joints, "image_size": self.image_size,
                "heatmap_size": self.heatmap_size, "encoder_channels": self.encoder_channels,
                "decoder_channels": self.decoder_channels}

    @classmethod
    def from_architecture(cls, arch: dict) -> "PoseNetwork":
        return cls(**arch)

    def forward(self, images: torch.Tensor) -> torch.Tensor:
        """(N, 3, S, S) float in [0, 1] -> (N, K, Hh, Wh) raw heatmaps."""
        if images.ndim != 4 or images.shape[1] != 3 or tuple(images.shape[2:]) != (self.image_size,) * 2:
            raise RejectedInputError(
                f"expected images (N, 3, {self.image_size}, {self.image_size}), got {tuple(images.shape)}")
        return self.head(self.decoder(self.encoder(images)))

    def param_count(self) -> int:
        return sum(p.numel() for p in self.parameters())


def images_to_tensor(images) -> torch.Tensor:
    """List/array of H x W x 3 uint8 images -> (N, 3, H, W) float32 in [0, 1]."""
    arr = np.stack([np.asarray(im) for im in images]).astype(np.float32) / 255.0
    return torch.from_numpy(arr).permute(0, 3, 1, 2).contiguous()


def build_network(num_joints: int, data_cfg, net_cfg) -> PoseNetwork:
    return PoseNetwork(num_joints, data_cfg.image_size, data_cfg.heatmap_size,
                       net_cfg.encoder_channels, net_cfg.decoder_channels)
