import numpy as np
import torch

from control.errors import RejectedInputError
from models.pose_net import PoseNetwork, images_to_tensor
from skeleton.heatmap import Heatmap, decode_heatmap


class PosePredictor:
    """
    Inference wrapper around a PoseNetwork.
    - Always runs the network in eval mode under no_grad.
    - predict() returns one (Pose, confidences) per image, in input order.
    """
    def __init__(self, net: PoseNetwork, batch_size: int = 32):
        self.net = net
        self.batch_size = batch_size

        # Expose input/output metadata for validation elsewhere
        self.input_shape = (net.image_size, net.image_size, 3)
        self.num_joints = net.num_joints
        self.scale = net.image_size / net.heatmap_size

    def heatmaps(self, images) -> np.ndarray:
        """H x W x 3 uint8 images -> (N, K, Hh, Wh) float64, clamped at 0."""
        images = list(images)
        # Strict shape check before anything reaches the network
        for im in images:
            if tuple(np.shape(im)) != self.input_shape:
                raise RejectedInputError(f"bad image shape: got {np.shape(im)}, expected {self.input_shape}")
        if not images:
            return np.zeros((0, self.num_joints, self.net.heatmap_size, self.net.heatmap_size))

        was_training = self.net.training
        self.net.eval()
        out = []
        try:
            with torch.no_grad():
                for start in range(0, len(images), self.batch_size):
                    x = images_to_tensor(images[start:start + self.batch_size])
                    out.append(self.net(x).double().clamp_min(0.0).numpy())
        finally:
            self.net.train(was_training)
        return np.concatenate(out)

    def predict(self, images) -> list:
        """Decode every heatmap stack to (Pose, per-joint peak confidence)."""
        return [decode_heatmap(Heatmap(h, self.scale)) for h in self.heatmaps(images)]
