"""3D residual encoder, pretext heads and gap-conditioned downstream heads."""

from __future__ import annotations

import json
import math
from dataclasses import asdict, dataclass, field
from pathlib import Path
from typing import Sequence as Seq

import torch
import torch.nn as nn
import torch.nn.functional as F

from .data import MAX_GAP_YEARS, MAX_SEQUENCE_LENGTH, ValidationError

TOV_LENGTH = MAX_SEQUENCE_LENGTH  # T: padded sequence length for order verification
GAP_WIDTH = TOV_LENGTH - 1  # fixed width of the time-gap conditioning vector
PROJECTION_DIM = 128
CLASSIFIER_HIDDEN = (512, 256)

_BLOCKS = {"resnet10": (1, 1, 1, 1), "resnet18": (2, 2, 2, 2), "resnet34": (3, 4, 6, 3)}
_BASE_WIDTHS = (64, 128, 256, 512)


class ConfigError(ValueError):
    """Model or run configuration is inconsistent."""


@dataclass
class EncoderConfig:
    architecture: str = "resnet18"
    feature_dim: int = 512
    width_multiplier: float = 1.0
    stem: str = "full"  # "full": 7^3/2 conv + max-pool; "desk": 3^3/2 conv, no pool
    norm: str = "batch"  # batch | instance | group

    def __post_init__(self):
        if self.architecture not in _BLOCKS:
            raise ConfigError(f"unknown architecture {self.architecture!r}; choose from {sorted(_BLOCKS)}")
        if self.feature_dim < 8:
            raise ConfigError("feature_dim must be >= 8")
        if self.stem not in ("full", "desk"):
            raise ConfigError("stem must be 'full' or 'desk'")
        if self.norm not in ("batch", "instance", "group"):
            raise ConfigError("norm must be batch, instance or group")

    @property
    def widths(self) -> tuple[int, ...]:
        return tuple(max(2, int(round(w * self.width_multiplier))) for w in _BASE_WIDTHS)

    @classmethod
    def desk(cls, **kw) -> "EncoderConfig":
        kw = {"feature_dim": 64, "width_multiplier": 0.125, "stem": "desk", **kw}
        return cls(**kw)


def _norm(kind: str, ch: int) -> nn.Module:
    if kind == "batch":
        return nn.BatchNorm3d(ch)
    if kind == "instance":
        return nn.InstanceNorm3d(ch, affine=True)
    return nn.GroupNorm(max(1, ch // 4), ch)


class BasicBlock3d(nn.Module):
    def __init__(self, cin: int, cout: int, stride: int, norm: str):
        super().__init__()
        self.conv1 = nn.Conv3d(cin, cout, 3, stride, 1, bias=False)
        self.bn1 = _norm(norm, cout)
        self.conv2 = nn.Conv3d(cout, cout, 3, 1, 1, bias=False)
        self.bn2 = _norm(norm, cout)
        self.shortcut = None
        if stride != 1 or cin != cout:
            self.shortcut = nn.Sequential(nn.Conv3d(cin, cout, 1, stride, bias=False), _norm(norm, cout))

    def forward(self, x):
        out = F.relu(self.bn1(self.conv1(x)))
        out = self.bn2(self.conv2(out))
        return F.relu(out + (x if self.shortcut is None else self.shortcut(x)))


class Encoder(nn.Module):
    """Residual 3D CNN mapping (B, 1, D, H, W) to (B, feature_dim)."""

    def __init__(self, config: EncoderConfig):
        super().__init__()
        self.config = config
        w = config.widths
        if config.stem == "full":
            self.stem = nn.Sequential(
                nn.Conv3d(1, w[0], 7, 2, 3, bias=False), _norm(config.norm, w[0]), nn.ReLU(inplace=True), nn.MaxPool3d(3, 2, 1)
            )
        else:
            self.stem = nn.Sequential(nn.Conv3d(1, w[0], 3, 2, 1, bias=False), _norm(config.norm, w[0]), nn.ReLU(inplace=True))
        layers, cin = [], w[0]
        for stage, (cout, nblocks) in enumerate(zip(w, _BLOCKS[config.architecture])):
            for b in range(nblocks):
                layers.append(BasicBlock3d(cin, cout, 2 if (b == 0 and stage > 0) else 1, config.norm))
                cin = cout
        self.layers = nn.Sequential(*layers)
        self.pool = nn.AdaptiveAvgPool3d(1)
        self.fc = nn.Identity() if cin == config.feature_dim else nn.Linear(cin, config.feature_dim)
        for m in self.modules():
            if isinstance(m, nn.Conv3d):
                nn.init.kaiming_normal_(m.weight, mode="fan_out", nonlinearity="relu")

    @property
    def feature_dim(self) -> int:
        return self.config.feature_dim

    def forward(self, x: torch.Tensor) -> torch.Tensor:
        if x.ndim == 4:
            x = x.unsqueeze(1)
        if x.ndim != 5 or x.shape[1] != 1:
            raise ValidationError(f"encoder expects (B, 1, D, H, W), got {tuple(x.shape)}")
        return self.fc(torch.flatten(self.pool(self.layers(self.stem(x))), 1))


def mlp(in_dim: int, hidden: Seq[int], out_dim: int) -> nn.Sequential:
    """Linear/ReLU stack; the last module is the (replaceable) output layer."""
    mods, d = [], in_dim
    for h in hidden:
        mods += [nn.Linear(d, h), nn.ReLU(inplace=True)]
        d = h
    mods.append(nn.Linear(d, out_dim))
    return nn.Sequential(*mods)


def trunk_of(head: nn.Sequential) -> nn.Sequential:
    """Every layer of an MLP head except the output layer."""
    return nn.Sequential(*list(head.children())[:-1])


class SSLModel(nn.Module):
    """Shared encoder plus every pretext head.

    Heads that a method does not use simply receive no gradient.
    """

    def __init__(self, config: EncoderConfig, hidden: Seq[int] = CLASSIFIER_HIDDEN, projection_dim: int = PROJECTION_DIM, lengths=(2, 3, 4)):
        super().__init__()
        self.encoder = Encoder(config)
        d = config.feature_dim
        self.hidden = tuple(hidden)
        self.tov_head = mlp(TOV_LENGTH * d, hidden, 1)
        bad = set(lengths) - {2, 3, 4}
        if bad:
            raise ConfigError(f"permutation heads only exist for lengths 2-4, got {sorted(bad)}")
        self.top_heads = nn.ModuleDict({str(n): mlp(n * d, hidden, math.factorial(n)) for n in sorted(lengths)})
        self.projection = nn.Sequential(nn.Linear(d, d), nn.ReLU(inplace=True), nn.Linear(d, projection_dim))

    @property
    def feature_dim(self) -> int:
        return self.encoder.feature_dim

    def encode(self, x: torch.Tensor) -> torch.Tensor:
        return self.encoder(x)

    def encode_sequences(self, x: torch.Tensor) -> torch.Tensor:
        """(B, L, D, H, W) -> (B, L, feature_dim); every volume encoded independently."""
        b, length = x.shape[:2]
        return self.encoder(x.reshape(b * length, 1, *x.shape[2:])).reshape(b, length, -1)

    def tov_logits(self, features: torch.Tensor) -> torch.Tensor:
        if features.ndim != 3 or features.shape[1] != TOV_LENGTH:
            raise ValidationError(f"order verification needs exactly {TOV_LENGTH} features per sample, got {tuple(features.shape)}")
        return self.tov_head(features.flatten(1)).squeeze(-1)

    def tov_forward(self, features: torch.Tensor) -> torch.Tensor:
        return torch.sigmoid(self.tov_logits(features))

    def top_forward(self, features: torch.Tensor, n: int) -> torch.Tensor:
        key = str(n)
        if key not in self.top_heads:
            raise ConfigError(f"no permutation head for n={n}")
        if features.ndim != 3 or features.shape[1] != n:
            raise ValidationError(f"expected (B, {n}, d) features, got {tuple(features.shape)}")
        return self.top_heads[key](features.flatten(1))

    def project(self, h: torch.Tensor) -> torch.Tensor:
        return self.projection(h)


def encode_gaps(gaps: torch.Tensor | Seq[float], width: int = GAP_WIDTH, batch: int | None = None) -> torch.Tensor:
    """Gaps (years) / 2.5, zero-padded on the right to ``width``."""
    g = torch.as_tensor(gaps)
    if not g.is_floating_point():
        g = g.to(torch.get_default_dtype())
    if g.ndim == 1:
        g = g.unsqueeze(0) if batch is None else g.expand(batch, -1)
    if g.shape[1] > width:
        raise ValidationError(f"{g.shape[1]} gaps exceed conditioning width {width}")
    return F.pad(g / MAX_GAP_YEARS, (0, width - g.shape[1]))


class DownstreamModel(nn.Module):
    """Encoder + MLP trunk + (optionally gap-conditioned) output layer.

    ``pad_to`` zero-pads the image sequence (order-verification trunks expect
    a fixed-length input).
    """

    def __init__(
        self,
        encoder: Encoder,
        trunk: nn.Sequential,
        trunk_out: int,
        num_images: int,
        num_classes: int,
        pad_to: int | None = None,
        input_shape: Seq[int] | None = None,
    ):
        super().__init__()
        if num_classes < 2:
            raise ConfigError("a downstream task needs at least two classes")
        self.encoder = encoder
        self.trunk = trunk
        self.num_images = num_images
        self.pad_to = pad_to
        self.input_shape = tuple(input_shape) if input_shape else None
        self.gap_width = GAP_WIDTH if num_images >= 2 else 0
        self.final = nn.Linear(trunk_out + self.gap_width, num_classes)

    def forward(self, volumes: torch.Tensor, gaps: torch.Tensor | None = None) -> torch.Tensor:
        """volumes: (B, k, D, H, W); gaps: (B, k-1) years."""
        b, k = volumes.shape[:2]
        if k != self.num_images:
            raise ValidationError(f"model expects {self.num_images} images, got {k}")
        if self.pad_to and k < self.pad_to:
            volumes = torch.cat([volumes, volumes.new_zeros(b, self.pad_to - k, *volumes.shape[2:])], dim=1)
        feats = self.encoder(volumes.reshape(-1, 1, *volumes.shape[2:])).reshape(b, volumes.shape[1], -1)
        return self.head_forward(feats, gaps)

    def head_forward(self, features: torch.Tensor, gaps: torch.Tensor | None = None) -> torch.Tensor:
        h = self.trunk(features.flatten(1))
        if self.gap_width:
            if gaps is None or gaps.shape[-1] != self.num_images - 1:
                raise ValidationError(f"expected {self.num_images - 1} gaps per sample")
            h = torch.cat([h, encode_gaps(gaps, self.gap_width).to(h.dtype)], dim=1)
        elif gaps is not None and gaps.numel():
            raise ValidationError("single-image model takes no gaps")
        return self.final(h)


def downstream_forward(model: DownstreamModel, features: torch.Tensor, gaps) -> torch.Tensor:
    """Class logits from pre-computed per-image features (B, k, d) and gaps (B, k-1)."""
    gaps = None if gaps is None else torch.as_tensor(gaps, dtype=features.dtype)
    if gaps is not None and gaps.ndim == 1:
        gaps = gaps.unsqueeze(0)
    if features.ndim == 2:
        features = features.unsqueeze(0)
    k = features.shape[1]
    if model.pad_to and k < model.pad_to:
        if model.input_shape is None:
            raise ConfigError("padding features needs the model's input_shape")
        pad = model.encoder(features.new_zeros(1, 1, *model.input_shape))
        features = torch.cat([features, pad.expand(features.shape[0], model.pad_to - k, -1)], dim=1)
    return model.head_forward(features, gaps)


def build_downstream(
    source: SSLModel | None,
    method: str,
    num_images: int,
    num_classes: int,
    encoder_config: EncoderConfig,
    hidden: Seq[int] = CLASSIFIER_HIDDEN,
    input_shape: Seq[int] | None = None,
) -> DownstreamModel:
    """Adapt a pre-trained model (or build a fresh one when ``source`` is None).

    Single-image tasks keep only the encoder and train a new MLP. Multi-image
    tasks reuse the pretext classifier's trunk: the length-k permutation head
    for TOP/TOPC, the padded order-verification head for TOV.
    """
    method = method.upper()
    if source is None:
        encoder = Encoder(encoder_config)
        d = encoder.feature_dim
        trunk = trunk_of(mlp(num_images * d, hidden, 1))
        return DownstreamModel(encoder, trunk, hidden[-1], num_images, num_classes, input_shape=input_shape)
    encoder = source.encoder
    d = encoder.feature_dim
    if num_images == 1:
        return DownstreamModel(encoder, trunk_of(mlp(d, hidden, 1)), hidden[-1], 1, num_classes, input_shape=input_shape)
    if method == "TOV":
        trunk = trunk_of(source.tov_head)
        return DownstreamModel(encoder, trunk, source.hidden[-1], num_images, num_classes, TOV_LENGTH, input_shape)
    if method in ("TOP", "TOPC"):
        if str(num_images) not in source.top_heads:
            raise ConfigError(f"pre-trained model has no permutation head for {num_images} images")
        trunk = trunk_of(source.top_heads[str(num_images)])
        return DownstreamModel(encoder, trunk, source.hidden[-1], num_images, num_classes, input_shape=input_shape)
    raise ConfigError(f"cannot adapt a {method} checkpoint")


# --------------------------------------------------------------------------
# Checkpoints
# --------------------------------------------------------------------------


@dataclass
class CheckpointMeta:
    method: str  # TOV | TOP | TOPC | SUPERVISED
    kind: str  # pretrain | downstream
    encoder: dict
    epoch: int
    config_hash: str
    extra: dict = field(default_factory=dict)


def save_checkpoint(path: str | Path, model: nn.Module, meta: CheckpointMeta) -> Path:
    path = Path(path)
    path.parent.mkdir(parents=True, exist_ok=True)
    torch.save(model.state_dict(), path)
    path.with_suffix(".json").write_text(json.dumps(asdict(meta), indent=2))
    return path


def read_checkpoint_meta(path: str | Path) -> CheckpointMeta:
    return CheckpointMeta(**json.loads(Path(path).with_suffix(".json").read_text()))


def load_checkpoint(path: str | Path) -> tuple[nn.Module, CheckpointMeta]:
    path = Path(path)
    if not path.exists():
        raise FileNotFoundError(f"checkpoint {path} not found")
    meta = read_checkpoint_meta(path)
    enc = EncoderConfig(**meta.encoder)
    hidden = tuple(meta.extra.get("hidden", CLASSIFIER_HIDDEN))
    if meta.kind == "pretrain":
        model = SSLModel(enc, hidden, meta.extra.get("projection_dim", PROJECTION_DIM))
    else:
        src = None if meta.extra["source_method"] == "SUPERVISED" else SSLModel(enc, hidden)
        x = meta.extra
        model = build_downstream(src, x["source_method"], x["num_images"], x["num_classes"], enc, hidden, x.get("input_shape"))
    model.load_state_dict(torch.load(path, map_location="cpu", weights_only=True))
    model.eval()
    return model, meta
