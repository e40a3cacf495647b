"""Three-branch and single-image classifiers over a shared, frozen CNN.

The CNN runs once per follow-up with the same weights. Its flattened outputs
either go through an LSTM (50 units) or straight to the output layer. Dropout
(0.2) sits right before the 15-unit sigmoid output in every variant.
"""

from __future__ import annotations

import hashlib
from dataclasses import asdict, dataclass, replace
from pathlib import Path
from typing import Sequence

import numpy as np
import torch
from torch import nn

from .backbones import BACKBONES, backbone_state_count, build_backbone
from .errors import ConfigError, DecodeError, ShapeMismatch, VersionMismatch
from .metadata import NUM_LABELS

SEQUENCE_MODES = ("per_image", "concat_first")
CHECKPOINT_FORMAT = "xrayseq-checkpoint"
CHECKPOINT_VERSION = 1


@dataclass(frozen=True)
class ModelConfig:
    backbone: str = "resnet50v2"
    use_lstm: bool = False
    lstm_units: int = 50
    lstm_sequence_mode: str = "per_image"
    dropout_rate: float = 0.2
    input_size: int = 128
    channels: int = 1
    num_outputs: int = NUM_LABELS
    branches: int = 3
    pretrained: bool = False
    seed: int = 0

    def validate(self) -> None:
        if self.backbone not in BACKBONES:
            raise ConfigError(f"unknown backbone {self.backbone!r}")
        if self.lstm_units <= 0:
            raise ConfigError("lstm_units must be positive")
        if not 0.0 <= self.dropout_rate < 1.0:
            raise ConfigError("dropout_rate must lie in [0, 1)")
        if self.num_outputs != NUM_LABELS:
            raise ConfigError(f"num_outputs must equal the vocabulary size {NUM_LABELS}")
        if self.branches not in (1, 3):
            raise ConfigError("branches must be 1 or 3")
        if self.channels not in (1, 3):
            raise ConfigError("channels must be 1 or 3")
        if self.lstm_sequence_mode not in SEQUENCE_MODES:
            raise ConfigError(f"unknown lstm_sequence_mode {self.lstm_sequence_mode!r}")
        if self.branches == 1 and self.use_lstm:
            raise ConfigError("the single-image model has no LSTM head")
        if self.pretrained:
            raise ConfigError("pretrained backbone weights are not supported")

    @property
    def descriptor(self) -> str:
        return f"{self.backbone}_{'lstm' if self.use_lstm else 'nolstm'}_{self.branches}img"


class LSTM(nn.Module):
    """Single-layer LSTM with one bias vector per gate (gate order i, f, c, o).

    tanh cell activation, sigmoid recurrent activation. Initialisation:
    Glorot-uniform input kernel, orthogonal recurrent kernel, zero bias with
    the forget gate bias set to one. Returns the last hidden state.
    """

    def __init__(self, input_size: int, units: int):
        super().__init__()
        self.units = units
        self.weight_ih = nn.Parameter(torch.empty(4 * units, input_size))
        self.weight_hh = nn.Parameter(torch.empty(4 * units, units))
        self.bias = nn.Parameter(torch.zeros(4 * units))
        nn.init.xavier_uniform_(self.weight_ih)
        nn.init.orthogonal_(self.weight_hh)
        with torch.no_grad():
            self.bias[units : 2 * units] = 1.0

    def forward(self, seq: torch.Tensor) -> torch.Tensor:
        batch = seq.shape[0]
        h = seq.new_zeros(batch, self.units)
        c = seq.new_zeros(batch, self.units)
        for t in range(seq.shape[1]):
            gates = seq[:, t] @ self.weight_ih.T + h @ self.weight_hh.T + self.bias
            i, f, g, o = gates.chunk(4, dim=1)
            c = torch.sigmoid(f) * c + torch.sigmoid(i) * torch.tanh(g)
            h = torch.sigmoid(o) * torch.tanh(c)
        return h


def _dense(in_features: int, out_features: int) -> nn.Linear:
    layer = nn.Linear(in_features, out_features)
    nn.init.xavier_uniform_(layer.weight)
    nn.init.zeros_(layer.bias)
    return layer


class Head(nn.Module):
    """Trainable part: optional LSTM, dropout, 15-unit output layer (logits)."""

    def __init__(self, config: ModelConfig, feature_dim: int):
        super().__init__()
        self.config = config
        self.feature_dim = feature_dim
        width = feature_dim * config.branches
        if config.use_lstm:
            lstm_in = feature_dim if config.lstm_sequence_mode == "per_image" else width
            self.lstm: LSTM | None = LSTM(lstm_in, config.lstm_units)
            width = config.lstm_units
        else:
            self.lstm = None
        self.dropout = nn.Dropout(config.dropout_rate)
        self.output = _dense(width, config.num_outputs)

    def forward(self, features: torch.Tensor) -> torch.Tensor:
        """``features``: (batch, branches, feature_dim) -> logits (batch, num_outputs)."""
        if self.lstm is not None:
            if self.config.lstm_sequence_mode == "per_image":
                x = self.lstm(features)
            else:
                x = self.lstm(features.flatten(1)[:, None, :])
        else:
            x = features.flatten(1)
        return self.output(self.dropout(x))


class BuiltModel(nn.Module):
    """Frozen backbone shared by all branches plus a trainable head.

    Inputs are channels-last image batches, one per branch, each
    (batch, H, W, C). ``forward`` returns sigmoid probabilities.
    """

    def __init__(self, config: ModelConfig):
        super().__init__()
        config.validate()
        self.config = config
        self.backbone = build_backbone(config.backbone, config.channels)
        self.backbone.requires_grad_(False)
        self.backbone.eval()
        with torch.no_grad():
            probe = torch.zeros(1, config.channels, config.input_size, config.input_size)
            self.feature_dim = int(self.backbone(probe).numel())
        self.head = Head(config, self.feature_dim)

    def train(self, mode: bool = True) -> "BuiltModel":
        super().train(mode)
        # BatchNorm statistics stay frozen along with the weights
        self.backbone.eval()
        return self

    def _to_nchw(self, x: torch.Tensor | np.ndarray) -> torch.Tensor:
        t = torch.as_tensor(x)
        cfg = self.config
        expected = (cfg.input_size, cfg.input_size, cfg.channels)
        if t.ndim != 4 or tuple(t.shape[1:]) != expected:
            raise ShapeMismatch(f"expected (batch, {', '.join(map(str, expected))}), got {tuple(t.shape)}")
        dtype = next(self.head.parameters()).dtype
        return t.to(dtype).permute(0, 3, 1, 2)

    def features(self, inputs: Sequence[torch.Tensor | np.ndarray]) -> torch.Tensor:
        """(batch, branches, feature_dim) flattened backbone outputs."""
        if len(inputs) != self.config.branches:
            raise ShapeMismatch(f"model takes {self.config.branches} image batch(es), got {len(inputs)}")
        images = [self._to_nchw(x) for x in inputs]
        sizes = {im.shape[0] for im in images}
        if len(sizes) != 1:
            raise ShapeMismatch(f"branch batch sizes differ: {sorted(sizes)}")
        batch = images[0].shape[0]
        with torch.no_grad():
            maps = self.backbone(torch.cat(images, dim=0))
        return maps.flatten(1).reshape(len(images), batch, -1).transpose(0, 1)

    def logits(self, inputs: Sequence[torch.Tensor | np.ndarray]) -> torch.Tensor:
        return self.head(self.features(inputs))

    def forward(self, *inputs: torch.Tensor | np.ndarray) -> torch.Tensor:
        return torch.sigmoid(self.logits(inputs))

    def frozen_state(self) -> dict[str, torch.Tensor]:
        return {f"backbone.{k}": v for k, v in self.backbone.state_dict().items()}

    def trainable_parameters(self) -> list[nn.Parameter]:
        return [p for p in self.head.parameters() if p.requires_grad]


def _seeded_build(config: ModelConfig) -> BuiltModel:
    with torch.random.fork_rng(devices=[]):
        torch.manual_seed(config.seed)
        return BuiltModel(config)


def build_sequence_model(config: ModelConfig) -> BuiltModel:
    if config.branches != 3:
        raise ConfigError("build_sequence_model requires branches=3")
    return _seeded_build(config)


def build_single_image_model(config: ModelConfig) -> BuiltModel:
    if config.branches != 1:
        config = replace(config, branches=1)
    if config.use_lstm:
        raise ConfigError("the single-image model has no LSTM head")
    return _seeded_build(config)


def build_model(config: ModelConfig) -> BuiltModel:
    if config.branches == 1:
        return build_single_image_model(config)
    return build_sequence_model(config)


@dataclass(frozen=True)
class ParameterCounts:
    frozen: int
    trainable: int
    total: int


def count_parameters(model: BuiltModel) -> ParameterCounts:
    """Frozen = backbone weights and BatchNorm statistics; trainable = head weights."""
    frozen = backbone_state_count(model.backbone)
    trainable = sum(p.numel() for p in model.head.parameters())
    return ParameterCounts(frozen, trainable, frozen + trainable)


def frozen_digest(model: BuiltModel) -> str:
    """SHA-256 over every frozen tensor, in name order."""
    h = hashlib.sha256()
    for name, tensor in sorted(model.frozen_state().items()):
        h.update(name.encode())
        h.update(tensor.detach().cpu().contiguous().numpy().tobytes())
    return h.hexdigest()


def save_checkpoint(model: BuiltModel, path: str | Path, meta: dict | None = None) -> Path:
    path = Path(path)
    path.parent.mkdir(parents=True, exist_ok=True)
    state = model.state_dict()
    payload = {
        "format": CHECKPOINT_FORMAT,
        "version": CHECKPOINT_VERSION,
        "config": asdict(model.config),
        "frozen": sorted(k for k in state if k.startswith("backbone.")),
        "trainable": sorted(k for k in state if k.startswith("head.")),
        "state": state,
        "meta": dict(meta or {}),
    }
    torch.save(payload, path)
    return path


def read_checkpoint(path: str | Path) -> dict:
    try:
        payload = torch.load(path, map_location="cpu", weights_only=True)
    except FileNotFoundError:
        raise
    except Exception as exc:  # torch raises a variety of types for damaged files
        raise DecodeError(f"cannot read checkpoint {path}: {exc}") from exc
    if not isinstance(payload, dict) or payload.get("format") != CHECKPOINT_FORMAT:
        raise VersionMismatch(f"{path} is not an xrayseq checkpoint")
    if payload.get("version") != CHECKPOINT_VERSION:
        raise VersionMismatch(
            f"{path}: checkpoint version {payload.get('version')} != supported {CHECKPOINT_VERSION}"
        )
    return payload


def load_checkpoint(path: str | Path) -> BuiltModel:
    payload = read_checkpoint(path)
    try:
        config = ModelConfig(**payload["config"])
    except TypeError as exc:
        raise VersionMismatch(f"{path}: incompatible model config: {exc}") from exc
    model = BuiltModel(config)
    state = payload["state"]
    expected = set(model.state_dict())
    if set(state) != expected:
        raise VersionMismatch(f"{path}: parameter set does not match config {config.descriptor}")
    model.to(state["head.output.weight"].dtype)
    model.load_state_dict(state)
    model.eval()
    model.checkpoint_meta = payload.get("meta", {})
    return model
