"""Micro-CNN gaze regressor whose conv padding can be replaced by trainable prompts."""

from __future__ import annotations

import json
import math
from dataclasses import asdict, dataclass, field
from pathlib import Path
from typing import NamedTuple, Sequence

import numpy as np

from . import autodiff as ad
from .autodiff import ConfigurationError, DimensionError, Tensor

CHECKPOINT_VERSION = 1


class ConvSpec(NamedTuple):
    out_channels: int
    kernel: int
    stride: int
    pad_width: int


DEFAULT_CONVS = (
    ConvSpec(8, 3, 1, 1),
    ConvSpec(16, 3, 2, 1),
    ConvSpec(16, 3, 1, 1),
    ConvSpec(32, 3, 2, 1),
    ConvSpec(32, 3, 1, 1),
    ConvSpec(32, 3, 1, 1),
)


@dataclass(frozen=True)
class ModelConfig:
    input_channels: int = 1
    input_size: int = 32
    conv_specs: tuple[ConvSpec, ...] = DEFAULT_CONVS
    head_dim: int = 32
    prompted_layers: int = 3

    def __post_init__(self):
        object.__setattr__(self, "conv_specs", tuple(ConvSpec(*c) for c in self.conv_specs))

    def layer_inputs(self) -> list[tuple[int, int, int]]:
        """(channels, height, width) entering each conv layer, before padding."""
        shapes = []
        c, s = self.input_channels, self.input_size
        for spec in self.conv_specs:
            shapes.append((c, s, s))
            s = (s + 2 * spec.pad_width - spec.kernel) // spec.stride + 1
            c = spec.out_channels
        return shapes

    def validate(self) -> None:
        if not 0 <= self.prompted_layers <= len(self.conv_specs):
            raise ConfigurationError(
                f"prompted_layers={self.prompted_layers} outside [0, {len(self.conv_specs)}]")
        if self.conv_specs[-1].out_channels != self.head_dim:
            raise ConfigurationError(
                f"head_dim={self.head_dim} != last conv out_channels {self.conv_specs[-1].out_channels}")
        for i, (spec, (_, h, _)) in enumerate(zip(self.conv_specs, self.layer_inputs())):
            if i < self.prompted_layers and spec.pad_width < 1:
                raise ConfigurationError(f"layer {i}: prompted layer needs pad_width >= 1")
            if h + 2 * spec.pad_width < spec.kernel:
                raise ConfigurationError(
                    f"layer {i}: spatial size {h} (+2*{spec.pad_width}) smaller than kernel {spec.kernel}")

    def to_dict(self) -> dict:
        d = asdict(self)
        d["conv_specs"] = [list(c) for c in self.conv_specs]
        return d

    @classmethod
    def from_dict(cls, d: dict) -> ModelConfig:
        d = dict(d)
        d["conv_specs"] = tuple(ConvSpec(*c) for c in d.get("conv_specs", DEFAULT_CONVS))
        return cls(**d)


@dataclass
class PromptBlock:
    """Frame values for one layer, in canonical border order."""

    tensor: Tensor
    channels: int
    height: int
    width: int
    pad: int

    def __len__(self) -> int:
        return self.tensor.size


@dataclass
class PromptSet:
    blocks: list[PromptBlock] = field(default_factory=list)

    def total_count(self) -> int:
        return sum(len(b) for b in self.blocks)

    def tensors(self) -> list[Tensor]:
        return [b.tensor for b in self.blocks]

    def arrays(self) -> list[np.ndarray]:
        return [b.tensor.data for b in self.blocks]

    def assign(self, arrays: Sequence[np.ndarray]) -> None:
        for block, arr in zip(self.blocks, arrays, strict=True):
            if arr.shape != block.tensor.shape:
                raise ConfigurationError(f"prompt shape {arr.shape} != {block.tensor.shape}")
            block.tensor.data = np.array(arr, dtype=block.tensor.dtype)


@dataclass(frozen=True)
class ParamPartition:
    frozen_ids: frozenset[str]
    prompt_ids: frozenset[str]


class GazeNet:
    """f_{theta, p}: conv stack -> global average pool -> linear head -> (pitch, yaw)."""

    def __init__(self, config: ModelConfig, params: dict[str, Tensor], prompts: PromptSet, seed: int):
        self.config = config
        self.params = params
        self.prompts = prompts
        self.seed = seed

    @property
    def partition(self) -> ParamPartition:
        return ParamPartition(frozenset(self.params), frozenset(self.prompt_names()))

    def prompt_names(self) -> list[str]:
        return [f"prompt{i}" for i in range(len(self.prompts.blocks))]

    def named_tensors(self) -> dict[str, Tensor]:
        """Every trainable leaf in canonical order: theta first, then prompts."""
        out = dict(self.params)
        out.update(zip(self.prompt_names(), self.prompts.tensors()))
        return out

    def forward(self, x: Tensor, prompts: Sequence[Tensor | None] | None = None,
                params: dict[str, Tensor] | None = None) -> Tensor:
        """Return (batch, 2) gaze predictions.

        ``prompts`` overrides the stored prompt tensors, one per prompted layer;
        each may be shared (n,) or per-sample (batch, n).
        """
        cfg = self.config
        params = self.params if params is None else params
        prompts = self.prompts.tensors() if prompts is None else list(prompts)
        if len(prompts) != cfg.prompted_layers:
            raise ConfigurationError(f"expected {cfg.prompted_layers} prompt tensors, got {len(prompts)}")
        expect = (cfg.input_channels, cfg.input_size, cfg.input_size)
        if x.ndim != 4 or x.shape[1:] != expect:
            raise DimensionError(f"forward: input shape {x.shape}, expected (batch, {', '.join(map(str, expect))})")
        h = x
        for i, spec in enumerate(cfg.conv_specs):
            if spec.pad_width:
                h = ad.pad_with_prompt(h, prompts[i] if i < len(prompts) else None, spec.pad_width)
            h = ad.conv2d(h, params[f"conv{i}.weight"], params[f"conv{i}.bias"], stride=spec.stride)
            h = ad.relu(h)
        h = ad.global_avg_pool(h)
        return ad.linear(h, params["head.weight"], params["head.bias"])

    __call__ = forward

    def state_arrays(self) -> dict[str, np.ndarray]:
        return {k: t.data for k, t in self.named_tensors().items()}

    def load_state_arrays(self, arrays: dict[str, np.ndarray]) -> None:
        for k, t in self.named_tensors().items():
            if arrays[k].shape != t.shape:
                raise ConfigurationError(f"{k}: shape {arrays[k].shape} != {t.shape}")
            t.data = np.array(arrays[k], dtype=t.dtype)

    def copy(self) -> GazeNet:
        params = {k: Tensor(v.data.copy(), requires_grad=True) for k, v in self.params.items()}
        blocks = [PromptBlock(Tensor(b.tensor.data.copy(), requires_grad=True), b.channels, b.height, b.width, b.pad)
                  for b in self.prompts.blocks]
        return GazeNet(self.config, params, PromptSet(blocks), self.seed)


def build_model(config: ModelConfig, seed: int, dtype=np.float32) -> GazeNet:
    """Fan-in uniform init for theta; zero prompts."""
    config.validate()
    rng = np.random.default_rng(seed)
    params: dict[str, Tensor] = {}
    c_in = config.input_channels
    for i, spec in enumerate(config.conv_specs):
        fan_in = c_in * spec.kernel * spec.kernel
        bound = math.sqrt(6.0 / fan_in)
        w = rng.uniform(-bound, bound, size=(spec.out_channels, c_in, spec.kernel, spec.kernel))
        params[f"conv{i}.weight"] = Tensor(w.astype(dtype), requires_grad=True)
        params[f"conv{i}.bias"] = Tensor(np.zeros(spec.out_channels, dtype=dtype), requires_grad=True)
        c_in = spec.out_channels
    bound = 1.0 / math.sqrt(config.head_dim)
    params["head.weight"] = Tensor(rng.uniform(-bound, bound, size=(2, config.head_dim)).astype(dtype),
                                   requires_grad=True)
    params["head.bias"] = Tensor(np.zeros(2, dtype=dtype), requires_grad=True)

    blocks = []
    for i, (c, h, w) in enumerate(config.layer_inputs()[: config.prompted_layers]):
        pad = config.conv_specs[i].pad_width
        n = ad.border_size(c, h, w, pad)
        blocks.append(PromptBlock(Tensor(np.zeros(n, dtype=dtype), requires_grad=True), c, h, w, pad))
    return GazeNet(config, params, PromptSet(blocks), seed)


# --------------------------------------------------------------------------- counting

# (channels, height, width, pad) entering each padded main-path conv of
# ResNet-18 at 224x224. 1x1 downsample convs are unpadded and omitted.
RESNET18_224_GEOMETRY: tuple[tuple[int, int, int, int], ...] = (
    ((3, 224, 224, 3),)
    + ((64, 56, 56, 1),) * 4
    + ((64, 56, 56, 1),) + ((128, 28, 28, 1),) * 3
    + ((128, 28, 28, 1),) + ((256, 14, 14, 1),) * 3
    + ((256, 14, 14, 1),) + ((512, 7, 7, 1),) * 3
)

# torchvision resnet18 minus its 1000-way fc head (11,689,512 - 513,000)
RESNET18_BACKBONE_PARAMS = 11_176_512


def count_prompt_params(geometry: Sequence[tuple[int, int, int, int]], prefix: int) -> int:
    if not 0 <= prefix <= len(geometry):
        raise ConfigurationError(f"prefix {prefix} outside [0, {len(geometry)}]")
    return sum(ad.border_size(c, h, w, pad) for c, h, w, pad in geometry[:prefix])


def model_geometry(config: ModelConfig) -> list[tuple[int, int, int, int]]:
    return [(c, h, w, spec.pad_width) for (c, h, w), spec in zip(config.layer_inputs(), config.conv_specs)]


# --------------------------------------------------------------------------- checkpoints


def save_checkpoint(model: GazeNet, path: str | Path, extra: dict | None = None) -> None:
    """Write ``<path>.json`` (manifest) and ``<path>.bin`` (little-endian float32 blob)."""
    path = Path(path)
    path.parent.mkdir(parents=True, exist_ok=True)
    entries, chunks, offset = [], [], 0
    for name, t in model.named_tensors().items():
        arr = np.ascontiguousarray(t.data, dtype="<f4")
        entries.append({"name": name, "shape": list(arr.shape), "offset": offset, "count": int(arr.size)})
        chunks.append(arr.tobytes())
        offset += arr.size
    part = model.partition
    manifest = {
        "format_version": CHECKPOINT_VERSION,
        "dtype": "float32-le",
        "config": model.config.to_dict(),
        "seed": model.seed,
        "partition": {"frozen_ids": sorted(part.frozen_ids), "prompt_ids": sorted(part.prompt_ids)},
        "tensors": entries,
        "extra": extra or {},
    }
    path.with_suffix(".json").write_text(json.dumps(manifest, indent=2, sort_keys=True) + "\n")
    path.with_suffix(".bin").write_bytes(b"".join(chunks))


def load_checkpoint(path: str | Path, expect_config: ModelConfig | None = None) -> GazeNet:
    path = Path(path)
    mpath, bpath = path.with_suffix(".json"), path.with_suffix(".bin")
    for p in (mpath, bpath):
        if not p.exists():
            raise FileNotFoundError(f"checkpoint file missing: {p}")
    manifest = json.loads(mpath.read_text())
    if manifest.get("format_version") != CHECKPOINT_VERSION:
        raise ValueError(f"{mpath}: unsupported format_version {manifest.get('format_version')}")
    config = ModelConfig.from_dict(manifest["config"])
    if expect_config is not None and config != expect_config:
        raise ConfigurationError(f"{mpath}: checkpoint config does not match the requested model config")
    blob = np.frombuffer(bpath.read_bytes(), dtype="<f4")
    total = sum(e["count"] for e in manifest["tensors"])
    if blob.size != total:
        raise ValueError(f"{bpath}: blob holds {blob.size} floats, manifest declares {total}")
    model = build_model(config, manifest["seed"])
    arrays = {e["name"]: blob[e["offset"]: e["offset"] + e["count"]].reshape(e["shape"]).astype(np.float32)
              for e in manifest["tensors"]}
    model.load_state_arrays(arrays)
    return model
