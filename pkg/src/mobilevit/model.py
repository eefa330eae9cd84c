"""MobileViT-XXS/XS/S classifiers, parameter audits, attention cost model, weights I/O."""

from __future__ import annotations

import struct
from collections import OrderedDict
from dataclasses import dataclass, field, replace
from pathlib import Path

import numpy as np

from .blocks import MobileViTBlock, MobileViTBlockSpec, MV2Block, MV2Spec
from .nn import ConvBN, ConvSpec, Linear, Module, global_avg_pool
from .rng import Rng
from .tensor import DTYPE, ShapeError, Tensor, no_grad

PATCH_CONFIGS = {"A": (2, 2, 2), "B": (8, 4, 2)}


@dataclass(frozen=True)
class ArchSpec:
    """Channel table for one network size.

    ``stages[i]`` for i in 0..4 lists the MV2 output widths (the first one
    carries the stage stride; stage 0 has stride 1). The MobileViT blocks sit
    at stages 2, 3, 4 with widths equal to the stage's last MV2 output.
    """

    stem: int
    stages: tuple
    dims: tuple
    depths: tuple
    exp_channels: int
    expansion: int


ARCHS = {
    "XXS": ArchSpec(16, ((16,), (24, 24, 24), (48,), (64,), (80,)), (64, 80, 96), (2, 4, 3), 320, 2),
    "XS": ArchSpec(16, ((32,), (48, 48, 48), (64,), (80,), (96,)), (96, 120, 144), (2, 4, 3), 384, 4),
    "S": ArchSpec(16, ((32,), (64, 64, 64), (96,), (128,), (160,)), (144, 192, 240), (2, 4, 3), 640, 4),
}

# trainable parameter totals reported for each size
REPORTED_PARAMS = {"XXS": 1.3e6, "XS": 2.3e6, "S": 5.6e6}


@dataclass(frozen=True)
class ModelConfig:
    variant: str = "S"
    patch: tuple = (2, 2, 2)
    kernel: int = 3
    num_classes: int = 1000
    skip: bool = True
    heads: int = 4
    arch: ArchSpec | None = field(default=None, compare=True)

    def __post_init__(self):
        if self.arch is None and self.variant not in ARCHS:
            raise ValueError(f"unknown variant {self.variant!r}; choose from {sorted(ARCHS)}")
        if len(self.patch) != 3 or min(self.patch) < 1:
            raise ValueError(f"patch config needs three positive sizes, got {self.patch}")

    @property
    def spec(self) -> ArchSpec:
        return self.arch if self.arch is not None else ARCHS[self.variant]

    def with_patch(self, patch) -> "ModelConfig":
        return replace(self, patch=parse_patch_config(patch))


def parse_patch_config(value) -> tuple:
    """'A', 'B', '8,4,2' or a 3-sequence -> tuple of patch heights."""
    if isinstance(value, str):
        if value.upper() in PATCH_CONFIGS:
            return PATCH_CONFIGS[value.upper()]
        value = [int(v) for v in value.split(",")]
    out = tuple(int(v) for v in value)
    if len(out) != 3 or min(out) < 1:
        raise ValueError(f"patch config must be A, B or three positive ints, got {value!r}")
    return out


class MobileViT(Module):
    def __init__(self, config: ModelConfig, rng: Rng):
        super().__init__()
        self.config = config
        a = config.spec
        self.stem = ConvBN(ConvSpec(3, a.stem, kernel=3, stride=2), rng.split("stem"))
        self.stage_names = ["stem"]
        in_ch = a.stem
        vit = 0
        for i, widths in enumerate(a.stages):
            stage = Module()
            for j, out_ch in enumerate(widths):
                stride = 2 if (i > 0 and j == 0) else 1
                setattr(stage, f"mv2_{j}", MV2Block(MV2Spec(in_ch, out_ch, stride, a.expansion),
                                                    rng.split("layer", i, "mv2", j)))
                in_ch = out_ch
            if i >= 2:
                p = config.patch[vit]
                spec = MobileViTBlockSpec(in_ch, a.dims[vit], a.depths[vit], config.kernel, (p, p),
                                          config.heads, config.skip)
                stage.mvit = MobileViTBlock(spec, rng.split("layer", i, "mvit"))
                vit += 1
            setattr(self, f"layer{i + 1}", stage)
            self.stage_names.append(f"layer{i + 1}")
        self.conv_exp = ConvBN(ConvSpec(in_ch, a.exp_channels, kernel=1), rng.split("conv_exp"))
        self.classifier = Linear(a.exp_channels, config.num_classes, rng.split("classifier"))
        self.stage_names += ["conv_exp", "classifier"]

    def features(self, x: Tensor) -> Tensor:
        if x.ndim != 4 or x.shape[1] != 3:
            raise ShapeError(f"expected a (B, 3, H, W) batch, got {x.shape}")
        x = self.stem(x)
        for i in range(len(self.config.spec.stages)):
            stage = getattr(self, f"layer{i + 1}")
            for _, block in stage.children():
                x = block(x)
        return self.conv_exp(x)

    def forward(self, x: Tensor) -> Tensor:
        return self.classifier(global_avg_pool(self.features(x)))

    def blocks(self):
        """(stage name, block) pairs in forward order."""
        for name in self.stage_names[1:-2]:
            for _, block in getattr(self, name).children():
                yield name, block


def build(config: ModelConfig | str, seed: int = 0) -> MobileViT:
    if isinstance(config, str):
        config = ModelConfig(variant=config)
    return MobileViT(config, Rng(seed).split("model"))


def count_params(model: Module) -> int:
    return model.num_parameters()


def param_breakdown(model: MobileViT) -> "OrderedDict[str, dict]":
    """Per stage: total, MV2 share and MobileViT-block share of trainable parameters."""
    out = OrderedDict()
    for name in model.stage_names:
        mod = getattr(model, name)
        row = {"total": mod.num_parameters(), "mv2": 0, "mobilevit": 0}
        if name.startswith("layer"):
            for _, block in mod.children():
                key = "mobilevit" if isinstance(block, MobileViTBlock) else "mv2"
                row[key] += block.num_parameters()
        out[name] = row
    return out


def forward(model: MobileViT, batch) -> Tensor:
    """Eval-mode, tape-free logits."""
    model.eval()
    with no_grad():
        return model(batch if isinstance(batch, Tensor) else Tensor(batch))


# -- attention cost model -----------------------------------------------------------


def _conv_out(size: int, stride: int) -> int:
    return -(-size // stride)


def attention_cost(config: ModelConfig | str, height: int, width: int) -> dict:
    """Multiply-accumulate counts for the MobileViT blocks at an input size.

    Per transformer layer the attention term is N^2 * P * d (P = h*w pixels
    per patch, N patches, sizes taken after any round-up resize). Projection
    and FFN MACs are listed alongside.
    """
    if isinstance(config, str):
        config = ModelConfig(variant=config)
    a = config.spec
    hf, wf = _conv_out(height, 2), _conv_out(width, 2)
    blocks = []
    vit = 0
    for i in range(1, len(a.stages)):
        hf, wf = _conv_out(hf, 2), _conv_out(wf, 2)
        if i < 2:
            continue
        p = config.patch[vit]
        d, depth = a.dims[vit], a.depths[vit]
        ht, wt = -(-hf // p) * p, -(-wf // p) * p
        P = p * p
        N = ht * wt // P
        attn = N * N * P * d
        proj = 4 * N * P * d * d
        ffn = 2 * N * P * d * (2 * d)
        blocks.append({
            "stage": f"layer{i + 1}", "feature": [hf, wf], "resized": [ht, wt], "patch": p,
            "P": P, "N": N, "d": d, "layers": depth, "attention_per_layer": attn,
            "attention": attn * depth, "projection": proj * depth, "ffn": ffn * depth,
        })
        vit += 1
    return {
        "blocks": blocks,
        "attention_total": sum(b["attention"] for b in blocks),
        "projection_total": sum(b["projection"] for b in blocks),
        "ffn_total": sum(b["ffn"] for b in blocks),
    }


# -- weights file ------------------------------------------------------------------

MAGIC = b"MVTW"
FORMAT_VERSION = 1


def save_weights(path, state) -> None:
    """Write a name -> array mapping (or a module's state) as a ``.mvtw`` file."""
    if isinstance(state, Module):
        state = state.state_dict()
    with open(path, "wb") as f:
        f.write(MAGIC)
        f.write(struct.pack("<II", FORMAT_VERSION, len(state)))
        for name, arr in state.items():
            arr = np.asarray(arr, dtype=DTYPE)
            raw = name.encode("utf-8")
            f.write(struct.pack("<H", len(raw)))
            f.write(raw)
            f.write(struct.pack("<B", arr.ndim))
            f.write(struct.pack(f"<{arr.ndim}I", *arr.shape))
            f.write(arr.astype("<f4").tobytes(order="C"))


def load_weights(path) -> "OrderedDict[str, np.ndarray]":
    data = Path(path).read_bytes()
    if data[:4] != MAGIC:
        raise ValueError(f"{path}: not a weights file (bad magic {data[:4]!r})")
    version, count = struct.unpack_from("<II", data, 4)
    if version != FORMAT_VERSION:
        raise ValueError(f"{path}: unsupported format version {version}")
    pos = 12
    out = OrderedDict()
    for _ in range(count):
        (n,) = struct.unpack_from("<H", data, pos)
        pos += 2
        name = data[pos:pos + n].decode("utf-8")
        pos += n
        (rank,) = struct.unpack_from("<B", data, pos)
        pos += 1
        shape = struct.unpack_from(f"<{rank}I", data, pos)
        pos += 4 * rank
        size = int(np.prod(shape, dtype=np.int64))
        out[name] = np.frombuffer(data, dtype="<f4", count=size, offset=pos).astype(DTYPE).reshape(shape)
        pos += 4 * size
    if pos != len(data):
        raise ValueError(f"{path}: {len(data) - pos} trailing bytes")
    return out
