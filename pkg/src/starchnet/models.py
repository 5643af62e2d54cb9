"""ResNet-18 backbone with a replaceable fully connected classification head."""
from __future__ import annotations

from collections import OrderedDict
from dataclasses import asdict, dataclass, field

import numpy as np

from .errors import ArgumentError, LoadError, ShapeError
from .nn import BasicBlock, BatchNorm2d, Conv2d, Dropout, Linear, LogSoftmax, MaxPool2d, Module, ReLU, Sequential
from . import functional as F

ARCH_ID = "resnet18"
HEAD_PREFIX = "head."
LOAD_POLICIES = ("backbone-only", "full", "strict")


@dataclass
class ModelSpec:
    num_classes: int = 9
    head_hidden: list[int] = field(default_factory=lambda: [500, 100])
    dropout_p: float = 0.5
    freeze_backbone: bool = False
    # reduced widths exist for fast CI runs; 64 is the standard ResNet-18
    base_width: int = 64
    input_size: int = 224

    def __post_init__(self):
        self.head_hidden = [int(h) for h in self.head_hidden]
        if self.num_classes < 1:
            raise ArgumentError(f"num_classes must be positive, got {self.num_classes}")
        if not 0.0 <= self.dropout_p < 1.0:
            raise ArgumentError(f"dropout_p must be in [0, 1), got {self.dropout_p}")
        if self.base_width < 1 or self.input_size < 32 or any(h < 1 for h in self.head_hidden):
            raise ArgumentError(f"invalid model spec {self}")

    @property
    def feature_width(self) -> int:
        return 8 * self.base_width

    def to_dict(self) -> dict:
        return {"id": ARCH_ID, **asdict(self)}

    @classmethod
    def from_dict(cls, data: dict) -> "ModelSpec":
        data = dict(data)
        arch = data.pop("id", ARCH_ID)
        if arch != ARCH_ID:
            raise ArgumentError(f"unsupported architecture {arch!r}")
        return cls(**data)


def build_head(in_features: int, spec: ModelSpec, rng: np.random.Generator) -> Sequential:
    """Hidden linear layers each followed by ReLU and dropout, then the class layer and log-softmax."""
    if in_features < 1:
        raise ArgumentError(f"in_features must be >= 1, got {in_features}")
    layers: list[Module] = []
    width = in_features
    for hidden in spec.head_hidden:
        layers += [Linear(width, hidden, rng), ReLU(), Dropout(spec.dropout_p)]
        width = hidden
    layers += [Linear(width, spec.num_classes, rng), LogSoftmax()]
    return Sequential(*layers)


class ResNet18(Module):
    def __init__(self, spec: ModelSpec, rng: np.random.Generator):
        super().__init__()
        object.__setattr__(self, "spec", spec)
        w = spec.base_width
        self.conv1 = Conv2d(3, w, 7, stride=2, padding=3, rng=rng)
        self.bn1 = BatchNorm2d(w)
        self.maxpool = MaxPool2d(3, stride=2, padding=1)
        in_ch = w
        for i, width in enumerate((w, 2 * w, 4 * w, 8 * w), start=1):
            stride = 1 if i == 1 else 2
            setattr(self, f"layer{i}", Sequential(BasicBlock(in_ch, width, stride, rng), BasicBlock(width, width, 1, rng)))
            in_ch = width
        self.head = build_head(in_ch, spec, rng)
        self.set_rng(np.random.default_rng(0))
        if spec.freeze_backbone:
            self.freeze_backbone()

    def backbone_modules(self) -> list[Module]:
        return [m for name, m in self.children() if name != "head"]

    def freeze_backbone(self) -> None:
        object.__setattr__(self.spec, "freeze_backbone", True)
        for name, p in self.named_parameters():
            if not name.startswith(HEAD_PREFIX):
                p.requires_grad = False
                p.grad = None
        self.train(self.training)

    def train(self, mode: bool = True) -> "ResNet18":
        super().train(mode)
        # a frozen backbone is a fixed feature extractor: BN uses running stats and never updates them
        if self.spec.freeze_backbone:
            for m in self.backbone_modules():
                m.eval()
        return self

    def set_rng(self, rng: np.random.Generator) -> None:
        """Generator used for dropout masks in training mode."""
        for m in self.modules():
            if isinstance(m, Dropout):
                m.rng = rng

    def features(self, x):
        size = self.spec.input_size
        if x.ndim != 4 or x.shape[1:] != (3, size, size):
            raise ShapeError(f"expected input of shape (N, 3, {size}, {size}), got {x.shape}")
        x = self.maxpool(F.relu(self.bn1(self.conv1(x))))
        for i in range(1, 5):
            x = getattr(self, f"layer{i}")(x)
        return F.global_avgpool(x)

    def forward(self, x):
        return self.head(self.features(x))


def build_resnet18(spec: ModelSpec, rng: np.random.Generator) -> ResNet18:
    return ResNet18(spec, rng)


@dataclass
class LoadReport:
    loaded: list[str]
    skipped: list[str]
    missing: list[str]


def load_backbone(model: Module, checkpoint, policy: str = "backbone-only") -> LoadReport:
    """Copy checkpoint tensors into ``model``.

    ``backbone-only`` leaves every ``head.*`` tensor at its current values,
    ``full`` loads whatever names match, ``strict`` requires the name sets to
    agree exactly.  All checks run before any tensor is written.
    """
    if policy not in LOAD_POLICIES:
        raise ArgumentError(f"unknown load policy {policy!r}; expected one of {LOAD_POLICIES}")
    targets = model.state_dict()
    source = checkpoint.tensors
    if policy == "strict":
        missing = [n for n in targets if n not in source]
        extra = [n for n in source if n not in targets]
        if missing or extra:
            raise LoadError(f"strict load name mismatch: missing {missing}, unexpected {extra}")

    def wanted(name):
        return not (policy == "backbone-only" and name.startswith(HEAD_PREFIX))

    loaded = [n for n in targets if wanted(n) and n in source]
    missing = [n for n in targets if wanted(n) and n not in source]
    skipped = [n for n in source if n not in loaded]
    for name in loaded:
        if source[name].shape != targets[name].shape:
            raise LoadError(
                f"shape conflict for {name}: checkpoint {source[name].shape} vs model {targets[name].shape}"
            )
    for name in loaded:
        targets[name][...] = source[name]
    return LoadReport(loaded, skipped, missing)


@dataclass
class ParamCount:
    total: int
    trainable: int
    per_layer: "OrderedDict[str, int]"


def count_params(model: Module) -> ParamCount:
    per_layer: OrderedDict[str, int] = OrderedDict()
    total = trainable = 0
    for name, p in model.named_parameters():
        layer = name.rsplit(".", 1)[0]
        per_layer[layer] = per_layer.get(layer, 0) + p.size
        total += p.size
        if p.requires_grad:
            trainable += p.size
    return ParamCount(total, trainable, per_layer)


def model_from_checkpoint(checkpoint) -> ResNet18:
    """Rebuild the architecture recorded in a checkpoint and load it strictly."""
    try:
        spec = ModelSpec.from_dict(checkpoint.metadata["architecture"])
    except (KeyError, TypeError) as exc:
        raise LoadError(f"checkpoint metadata lacks a usable architecture entry: {exc}") from exc
    model = build_resnet18(spec, np.random.default_rng(0))
    load_backbone(model, checkpoint, "strict")
    return model
