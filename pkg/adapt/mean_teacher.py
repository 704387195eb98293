import copy
from dataclasses import dataclass

import torch
import torch.nn as nn

from control.errors import RejectedInputError


@dataclass
class TeacherStudentPair:
    """
    Student trained by the optimizer, teacher tracking it by exponential moving average.
    Teacher parameters never require grad; they change only through ema_update.
    """
    student: nn.Module
    teacher: nn.Module
    alpha: float = 0.999

    def __post_init__(self):
        if not 0.0 <= self.alpha <= 1.0:
            raise RejectedInputError(f"alpha must be in [0, 1], got {self.alpha}")
        for p in self.teacher.parameters():
            p.requires_grad_(False)

    @classmethod
    def from_network(cls, net: nn.Module, alpha: float = 0.999) -> "TeacherStudentPair":
        """Both copies start from the same (source) weights."""
        return cls(student=net, teacher=copy.deepcopy(net), alpha=alpha)


def ema_update(pair: TeacherStudentPair):
    """
    teacher <- alpha * teacher + (1 - alpha) * student, elementwise.
    Float buffers (BatchNorm running stats) are averaged the same way; integer
    buffers such as num_batches_tracked are copied.
    """
    a = pair.alpha
    t_params = dict(pair.teacher.named_parameters())
    s_params = dict(pair.student.named_parameters())
    t_bufs = dict(pair.teacher.named_buffers())
    s_bufs = dict(pair.student.named_buffers())
    if t_params.keys() != s_params.keys() or t_bufs.keys() != s_bufs.keys():
        raise RejectedInputError("teacher and student architectures differ")

    with torch.no_grad():
        for name, t in list(t_params.items()) + list(t_bufs.items()):
            s = s_params[name] if name in s_params else s_bufs[name]
            if t.shape != s.shape:
                raise RejectedInputError(f"shape mismatch for {name}: teacher {tuple(t.shape)}, student {tuple(s.shape)}")
            if t.is_floating_point():
                t.mul_(a).add_(s, alpha=1.0 - a)
            else:
                t.copy_(s)
