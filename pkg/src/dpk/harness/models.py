"""Small convolutional classifiers with named stages for feature taps."""

from __future__ import annotations

import hashlib

import torch
from torch import nn

BASE_CHANNELS = (16, 32, 64, 128)


def _conv_bn(cin: int, cout: int, stride: int = 1) -> list[nn.Module]:
    return [
        nn.Conv2d(cin, cout, 3, stride=stride, padding=1, bias=False),
        nn.BatchNorm2d(cout),
        nn.ReLU(inplace=True),
    ]


class ToyConvNet(nn.Module):
    """Four-stage CNN; stage ``i`` halves the resolution for ``i > 1``.

    ``width`` scales every stage's channel count, so width 0.5 is the usual
    student and width 1.0 / 2.0 are teachers.
    """

    def __init__(self, width: float = 1.0, num_classes: int = 10, in_channels: int = 3):
        super().__init__()
        self.width = width
        self.num_classes = num_classes
        chans = [max(1, int(round(c * width))) for c in BASE_CHANNELS]
        self.channels = tuple(chans)
        stages = []
        cin = in_channels
        for i, cout in enumerate(chans):
            stride = 1 if i == 0 else 2
            stages.append(nn.Sequential(*_conv_bn(cin, cout, stride), *_conv_bn(cout, cout)))
            cin = cout
        self.stages = nn.ModuleDict({f"stage{i + 1}": s for i, s in enumerate(stages)})
        self.pool = nn.AdaptiveAvgPool2d(1)
        self.fc = nn.Linear(cin, num_classes)

    def forward(self, x):
        for stage in self.stages.values():
            x = stage(x)
        return self.fc(self.pool(x).flatten(1))


class FeatureTaps:
    """Captures named submodule outputs through forward hooks.

    >>> taps = FeatureTaps(model, ["stage4"])  # doctest: +SKIP
    >>> logits = model(x); taps.features["stage4"].shape  # doctest: +SKIP
    """

    def __init__(self, model: nn.Module, names):
        self.features: dict[str, torch.Tensor] = {}
        modules = dict(model.named_modules())
        self._handles = []
        for name in names:
            key = name if name in modules else f"stages.{name}"
            if key not in modules:
                raise KeyError(f"model has no stage named {name!r}")
            self._handles.append(modules[key].register_forward_hook(self._save(name)))

    def _save(self, name):
        def hook(module, inputs, output):
            self.features[name] = output

        return hook

    def remove(self):
        for h in self._handles:
            h.remove()
        self._handles = []


def parameter_checksum(model: nn.Module) -> str:
    """sha256 over every parameter and buffer, in state-dict order."""
    h = hashlib.sha256()
    for name, t in model.state_dict().items():
        h.update(name.encode())
        h.update(t.detach().cpu().contiguous().numpy().tobytes())
    return h.hexdigest()
