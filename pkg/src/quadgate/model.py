"""QCross-Att-PVT: region split, parallel encoders, cross-attention gating,
spatial reassembly and a transformer aggregator with a scalar regression head."""

from __future__ import annotations

import dataclasses
from dataclasses import dataclass, field
from typing import Sequence

import numpy as np

from . import tensor as T
from .errors import ConfigurationError, ContractError, DimensionError
from .nn import (
    Conv2d,
    LayerNorm,
    Linear,
    Module,
    Parameter,
    PatchEmbed,
    TransformerBlock,
    _normal,
    cls_attention_map,
    map_to_tokens,
    tokens_to_map,
)
from .tensor import Tensor, no_grad

# (rows, cols) of the tiling for each supported region count
REGION_GRIDS = {2: (1, 2), 4: (2, 2), 6: (2, 3)}
REGION_TAGS = {
    2: ("L", "R"),
    4: ("TL", "TR", "BL", "BR"),
    6: ("TL", "TC", "TR", "BL", "BC", "BR"),
}
ENCODER_KINDS = ("pvt", "vit")
AGGREGATOR_KINDS = ("vit", "gap", "pvt")


@dataclass
class ModelConfig:
    """Every architectural hyperparameter in one place."""

    input_size: tuple[int, int] = (448, 448)
    channels: int = 3
    patch_size: int = 4
    stage_channels: tuple[int, ...] = (32, 64, 160, 256)
    stage_heads: tuple[int, ...] = (1, 2, 5, 8)
    stage_depths: tuple[int, ...] = (2, 2, 2, 2)
    sra_ratios: tuple[int, ...] = (8, 4, 2, 1)
    num_regions: int = 4
    cag_intermediate: int | None = None
    aggregator_kind: str = "vit"
    aggregator_dim: int = 256
    aggregator_depth: int = 2
    aggregator_heads: int = 4
    aggregator_sra_ratio: int = 1
    head_hidden: int = 128
    encoder_kind: str = "pvt"
    vit_encoder_depth: int = 2
    mlp_ratio: int = 4
    score_scale: float = 1.0
    pixel_mean: float = 0.5
    pixel_std: float = 0.25

    def __post_init__(self):
        for name in ("input_size", "stage_channels", "stage_heads", "stage_depths", "sra_ratios"):
            setattr(self, name, tuple(int(v) for v in getattr(self, name)))
        if self.cag_intermediate is None:
            self.cag_intermediate = self.stage_channels[-1] if self.stage_channels else None

    @property
    def num_stages(self) -> int:
        return len(self.stage_channels)

    @property
    def region_grid(self) -> tuple[int, int]:
        return REGION_GRIDS[self.num_regions]

    @property
    def region_size(self) -> tuple[int, int]:
        rows, cols = self.region_grid
        return self.input_size[0] // rows, self.input_size[1] // cols

    @property
    def total_stride(self) -> int:
        return self.patch_size * 2 ** (self.num_stages - 1)

    @property
    def encoder_grid(self) -> tuple[int, int]:
        """Spatial size of each encoder's final feature map."""
        h, w = self.region_size
        return h // self.total_stride, w // self.total_stride

    @property
    def patch_grid(self) -> tuple[int, int]:
        """Token grid seen by the aggregator after reassembly."""
        rows, cols = self.region_grid
        h, w = self.encoder_grid
        return rows * h, cols * w

    def stage_shapes(self) -> list[tuple[int, int, int]]:
        """(h, w, C_k) per stage: each side is region side / (2^(k-1) * P)."""
        h, w = self.region_size
        return [(h // (2 ** k * self.patch_size), w // (2 ** k * self.patch_size), c)
                for k, c in enumerate(self.stage_channels)]

    def validate(self) -> "ModelConfig":
        n = self.num_stages
        if n == 0:
            raise ConfigurationError("at least one encoder stage is required")
        if not (len(self.stage_heads) == len(self.stage_depths) == len(self.sra_ratios) == n):
            raise ConfigurationError("stage_channels, stage_heads, stage_depths and sra_ratios must have equal length")
        if self.num_regions not in REGION_GRIDS:
            raise ConfigurationError(f"num_regions must be one of {sorted(REGION_GRIDS)}, got {self.num_regions}")
        if self.encoder_kind not in ENCODER_KINDS:
            raise ConfigurationError(f"encoder_kind must be one of {ENCODER_KINDS}")
        if self.aggregator_kind not in AGGREGATOR_KINDS:
            raise ConfigurationError(f"aggregator_kind must be one of {AGGREGATOR_KINDS}")
        rows, cols = self.region_grid
        H, W = self.input_size
        if H % rows or W % cols:
            raise ConfigurationError(f"input {H}x{W} cannot be tiled into {rows}x{cols} regions")
        h, w = self.region_size
        s = self.total_stride
        if h % s or w % s:
            raise ConfigurationError(
                f"region {h}x{w} must be divisible by patch_size * 2^(stages-1) = {s}")
        for k, ((sh, sw, c), heads, r) in enumerate(zip(self.stage_shapes(), self.stage_heads, self.sra_ratios)):
            if c % heads:
                raise ConfigurationError(f"stage {k + 1}: {c} channels not divisible by {heads} heads")
            if self.encoder_kind == "pvt" and (sh % r or sw % r):
                raise ConfigurationError(f"stage {k + 1}: grid {sh}x{sw} not divisible by SRA ratio {r}")
        if self.aggregator_dim % self.aggregator_heads:
            raise ConfigurationError("aggregator_dim must be divisible by aggregator_heads")
        if self.aggregator_kind == "pvt":
            gh, gw = self.patch_grid
            if gh % self.aggregator_sra_ratio or gw % self.aggregator_sra_ratio:
                raise ConfigurationError("aggregator grid not divisible by aggregator_sra_ratio")
        if self.cag_intermediate is None or self.cag_intermediate < 1:
            raise ConfigurationError("cag_intermediate must be a positive integer")
        return self

    def to_dict(self) -> dict:
        d = dataclasses.asdict(self)
        return {k: list(v) if isinstance(v, tuple) else v for k, v in d.items()}

    @classmethod
    def from_dict(cls, d: dict) -> "ModelConfig":
        names = {f.name for f in dataclasses.fields(cls)}
        unknown = set(d) - names
        if unknown:
            raise ConfigurationError(f"unknown model config keys: {sorted(unknown)}")
        return cls(**d)

    def replace(self, **changes) -> "ModelConfig":
        return dataclasses.replace(self, **changes)


def paper_config() -> ModelConfig:
    """Published settings: 448x448 input split into four 224x224 regions."""
    return ModelConfig()


def desk_config(score_scale: float = 100.0) -> ModelConfig:
    """64x64 grayscale input, one block per stage; trains on a CPU in minutes."""
    return ModelConfig(
        input_size=(64, 64),
        channels=1,
        stage_depths=(1, 1, 1, 1),
        sra_ratios=(4, 2, 1, 1),
        aggregator_dim=64,
        aggregator_depth=2,
        aggregator_heads=4,
        head_hidden=64,
        score_scale=score_scale,
    )


def gradcheck_config(size: int = 16) -> ModelConfig:
    """Tiny four-stage configuration for finite-difference checks."""
    return ModelConfig(
        input_size=(size, size),
        channels=3,  # one channel at P=1 leaves the patch-embed norm nearly flat
        patch_size=1,
        stage_channels=(4, 6, 8, 8),
        stage_heads=(1, 2, 2, 2),
        stage_depths=(1, 1, 1, 1),
        sra_ratios=(2, 2, 1, 1),
        cag_intermediate=4,
        aggregator_dim=8,
        aggregator_depth=1,
        aggregator_heads=2,
        head_hidden=6,
        mlp_ratio=2,
        vit_encoder_depth=1,
    )


# ----------------------------------------------------------------------
# region split / reassembly
# ----------------------------------------------------------------------


@dataclass
class QuadrantSet:
    """Row-major tiles of one input, with position tags."""

    regions: list
    tags: tuple[str, ...]
    grid: tuple[int, int]

    def __len__(self) -> int:
        return len(self.regions)


def split_quadrants(image, n: int = 4) -> QuadrantSet:
    """Cut (…, H, W) into ``n`` non-overlapping equal tiles, row-major."""
    if n not in REGION_GRIDS:
        raise ConfigurationError(f"unsupported region count {n}; use one of {sorted(REGION_GRIDS)}")
    rows, cols = REGION_GRIDS[n]
    H, W = image.shape[-2:]
    if H % rows or W % cols:
        raise ConfigurationError(f"image {H}x{W} cannot be split into {rows}x{cols} regions")
    h, w = H // rows, W // cols
    lead = (slice(None),) * (len(image.shape) - 2)
    regions = [image[lead + (slice(r * h, (r + 1) * h), slice(c * w, (c + 1) * w))]
               for r in range(rows) for c in range(cols)]
    return QuadrantSet(regions, REGION_TAGS[n], (rows, cols))


def reassemble(qs: QuadrantSet):
    """Inverse of :func:`split_quadrants`; accepts tensors or arrays."""
    rows, cols = qs.grid
    if len(qs.regions) != rows * cols:
        raise DimensionError(f"{len(qs.regions)} regions do not fill a {rows}x{cols} grid")
    if all(isinstance(r, np.ndarray) for r in qs.regions):
        return np.concatenate([np.concatenate(qs.regions[r * cols:(r + 1) * cols], axis=-1)
                               for r in range(rows)], axis=-2)
    row_maps = [T.concat(qs.regions[r * cols:(r + 1) * cols], axis=-1) for r in range(rows)]
    return T.concat(row_maps, axis=-2)


# ----------------------------------------------------------------------
# encoders
# ----------------------------------------------------------------------


class PVTStage(Module):
    def __init__(self, in_channels, dim, patch, heads, depth, sr_ratio, grid, mlp_ratio, rng):
        self.patch_embed = PatchEmbed(in_channels, dim, patch, rng)
        self.pos_embed = Parameter(_normal(rng, (1, grid[0] * grid[1], dim)))
        self.blocks = [TransformerBlock(dim, heads, rng, sr_ratio, mlp_ratio) for _ in range(depth)]
        self.norm = LayerNorm(dim)

    def forward(self, x: Tensor) -> Tensor:
        tokens, hw = self.patch_embed(x)
        tokens = tokens + self.pos_embed
        for blk in self.blocks:
            tokens = blk(tokens, hw)
        return tokens_to_map(self.norm(tokens), hw)


class PVTEncoder(Module):
    """Hierarchical encoder; stage k divides resolution by 2^(k-1) * P."""

    def __init__(self, config: ModelConfig, rng: np.random.Generator):
        h, w = config.region_size
        self.stages = []
        in_ch = config.channels
        for k, (c, heads, depth, r) in enumerate(zip(config.stage_channels, config.stage_heads,
                                                     config.stage_depths, config.sra_ratios)):
            patch = config.patch_size if k == 0 else 2
            h, w = h // patch, w // patch
            self.stages.append(PVTStage(in_ch, c, patch, heads, depth, r, (h, w), config.mlp_ratio, rng))
            in_ch = c

    def forward_stages(self, x: Tensor) -> list[Tensor]:
        maps = []
        for stage in self.stages:
            x = stage(x)
            maps.append(x)
        return maps

    def forward(self, x: Tensor) -> Tensor:
        return self.forward_stages(x)[-1]


class ViTEncoder(Module):
    """Single-scale encoder whose output grid and width match the last PVT stage."""

    def __init__(self, config: ModelConfig, rng: np.random.Generator):
        dim = config.stage_channels[-1]
        gh, gw = config.encoder_grid
        self.patch_embed = PatchEmbed(config.channels, dim, config.total_stride, rng)
        self.pos_embed = Parameter(_normal(rng, (1, gh * gw, dim)))
        self.blocks = [TransformerBlock(dim, config.stage_heads[-1], rng, 1, config.mlp_ratio)
                       for _ in range(config.vit_encoder_depth)]
        self.norm = LayerNorm(dim)

    def forward(self, x: Tensor) -> Tensor:
        tokens, hw = self.patch_embed(x)
        tokens = tokens + self.pos_embed
        for blk in self.blocks:
            tokens = blk(tokens)
        return tokens_to_map(self.norm(tokens), hw)


def pvt_encode(region, encoder: PVTEncoder) -> Tensor:
    return encoder(T.as_tensor(region))


# ----------------------------------------------------------------------
# cross-attention gate
# ----------------------------------------------------------------------


class CrossAttentionGate(Module):
    """alpha = sigmoid(conv_out(relu(conv_g(G) + conv_z(Z)))); output alpha * Z.

    All three convolutions are 1x1; ``G`` is the channel concatenation of the
    other regions' feature maps.
    """

    def __init__(self, z_channels: int, g_channels: int, intermediate: int, rng: np.random.Generator):
        self.conv_z = Conv2d(z_channels, intermediate, 1, rng)
        self.conv_g = Conv2d(g_channels, intermediate, 1, rng)
        self.conv_out = Conv2d(intermediate, 1, 1, rng)
        self._last_alpha: np.ndarray | None = None

    def coefficients(self, z: Tensor, others: Sequence[Tensor]) -> Tensor:
        zs = z.shape[-2:]
        for o in others:
            if o.shape[-2:] != zs:
                raise DimensionError(f"gating map spatial size {o.shape[-2:]} differs from {zs}")
        g = T.concat(list(others), axis=-3)
        return T.sigmoid(self.conv_out(T.relu(self.conv_g(g) + self.conv_z(z))))

    def forward(self, z: Tensor, others: Sequence[Tensor]) -> Tensor:
        alpha = self.coefficients(z, others)
        self._last_alpha = alpha.data
        return alpha * z

    @property
    def last_alpha(self) -> np.ndarray | None:
        return self._last_alpha


def cross_attention_gate(z: Tensor, others: Sequence[Tensor], gate: CrossAttentionGate) -> Tensor:
    return gate(z, others)


# ----------------------------------------------------------------------
# aggregators and head
# ----------------------------------------------------------------------


class ViTAggregator(Module):
    """1x1 conv to ``dim``, CLS token + learned positions, transformer blocks."""

    def __init__(self, in_channels, dim, depth, heads, grid, mlp_ratio, rng):
        self.proj = Conv2d(in_channels, dim, 1, rng)
        self.cls_token = Parameter(_normal(rng, (1, 1, dim)))
        self.pos_embed = Parameter(_normal(rng, (1, 1 + grid[0] * grid[1], dim)))
        self.blocks = [TransformerBlock(dim, heads, rng, 1, mlp_ratio) for _ in range(depth)]
        self.norm = LayerNorm(dim)
        self._grid = grid

    def forward(self, x: Tensor) -> Tensor:
        tokens = map_to_tokens(self.proj(x))
        b, _, d = tokens.shape
        cls = T.broadcast_to(self.cls_token, (b, 1, d))
        tokens = T.concat([cls, tokens], axis=1) + self.pos_embed
        for blk in self.blocks:
            tokens = blk(tokens)
        return self.norm(tokens)[:, 0, :]

    def attention_map(self) -> np.ndarray:
        att = cls_attention_map(self.blocks[-1])
        return att.reshape(att.shape[0], *self._grid)


class GAPAggregator(Module):
    """1x1 conv to ``dim`` then global average pooling."""

    def __init__(self, in_channels, dim, rng):
        self.proj = Conv2d(in_channels, dim, 1, rng)

    def forward(self, x: Tensor) -> Tensor:
        return T.mean(self.proj(x), axis=(2, 3))


class PVTAggregator(Module):
    """1x1 conv to ``dim``, SRA transformer blocks, mean over tokens."""

    def __init__(self, in_channels, dim, depth, heads, sr_ratio, grid, mlp_ratio, rng):
        self.proj = Conv2d(in_channels, dim, 1, rng)
        self.pos_embed = Parameter(_normal(rng, (1, grid[0] * grid[1], dim)))
        self.blocks = [TransformerBlock(dim, heads, rng, sr_ratio, mlp_ratio) for _ in range(depth)]
        self.norm = LayerNorm(dim)

    def forward(self, x: Tensor) -> Tensor:
        hw = x.shape[-2:]
        tokens = map_to_tokens(self.proj(x)) + self.pos_embed
        for blk in self.blocks:
            tokens = blk(tokens, hw)
        return T.mean(self.norm(tokens), axis=1)


class RegressionHead(Module):
    def __init__(self, dim: int, hidden: int, scale: float, rng: np.random.Generator):
        self.fc1 = Linear(dim, hidden, rng)
        self.fc2 = Linear(hidden, 1, rng)
        self._scale = float(scale)

    def forward(self, feat: Tensor) -> Tensor:
        out = self.fc2(T.gelu(self.fc1(feat)))
        out = T.reshape(out, (out.shape[0],))
        return out * self._scale if self._scale != 1.0 else out


# ----------------------------------------------------------------------
# full model
# ----------------------------------------------------------------------


class QCrossAttPVT(Module):
    def __init__(self, config: ModelConfig, seed: int | np.random.Generator = 0):
        self.config = config.validate()
        rng = seed if isinstance(seed, np.random.Generator) else np.random.default_rng(seed)
        n = config.num_regions
        c4 = config.stage_channels[-1]
        enc = PVTEncoder if config.encoder_kind == "pvt" else ViTEncoder
        self.encoders = [enc(config, rng) for _ in range(n)]
        self.gates = [CrossAttentionGate(c4, (n - 1) * c4, config.cag_intermediate, rng) for _ in range(n)]
        grid = config.patch_grid
        kind = config.aggregator_kind
        if kind == "vit":
            self.aggregator = ViTAggregator(c4, config.aggregator_dim, config.aggregator_depth,
                                            config.aggregator_heads, grid, config.mlp_ratio, rng)
        elif kind == "gap":
            self.aggregator = GAPAggregator(c4, config.aggregator_dim, rng)
        else:
            self.aggregator = PVTAggregator(c4, config.aggregator_dim, config.aggregator_depth,
                                            config.aggregator_heads, config.aggregator_sra_ratio,
                                            grid, config.mlp_ratio, rng)
        self.head = RegressionHead(config.aggregator_dim, config.head_hidden, config.score_scale, rng)

    def _check_input(self, x: Tensor) -> None:
        want = (self.config.channels, *self.config.input_size)
        if x.shape[-3:] != want:
            raise DimensionError(f"model expects images of shape {want}, got {x.shape}")

    def encode(self, x: Tensor) -> list[Tensor]:
        qs = split_quadrants(x, self.config.num_regions)
        return [enc(region) for enc, region in zip(self.encoders, qs.regions)]

    def gate(self, zs: list[Tensor]) -> list[Tensor]:
        return [gate(z, zs[:i] + zs[i + 1:]) for i, (gate, z) in enumerate(zip(self.gates, zs))]

    def forward(self, images) -> Tensor:
        """Predicted scores: shape (B,) for a batch, () for one (C, H, W) image."""
        x = T.as_tensor(images)
        single = x.ndim == 3
        if single:
            x = T.reshape(x, (1,) + x.shape)
        if x.ndim != 4:
            raise DimensionError(f"expected (C,H,W) or (B,C,H,W) input, got {x.shape}")
        self._check_input(x)
        x = (x - self.config.pixel_mean) * (1.0 / self.config.pixel_std)
        gated = self.gate(self.encode(x))
        grid = reassemble(QuadrantSet(gated, REGION_TAGS[self.config.num_regions], self.config.region_grid))
        out = self.head(self.aggregator(grid))
        return T.reshape(out, ()) if single else out

    def predict(self, images: np.ndarray, batch_size: int = 32) -> np.ndarray:
        images = np.asarray(images, dtype=np.float64)
        if images.ndim == 3:
            images = images[None]
        outs = []
        with no_grad():
            for i in range(0, len(images), batch_size):
                outs.append(self.forward(images[i:i + batch_size]).data)
        self.clear_caches()
        return np.concatenate(outs) if outs else np.zeros(0)

    def attention_maps(self, images: np.ndarray) -> np.ndarray:
        """CLS attention over the aggregator grid, (B, gh, gw), each summing to one.

        Aggregators without a CLS token give the uniform map.
        """
        images = np.asarray(images, dtype=np.float64)
        with no_grad():
            self.forward(images)
        gh, gw = self.config.patch_grid
        if isinstance(self.aggregator, ViTAggregator):
            maps = self.aggregator.attention_map()
        else:
            maps = np.full((len(images), gh, gw), 1.0 / (gh * gw))
        self.clear_caches()
        return maps

    def gate_maps(self) -> list[np.ndarray]:
        return [g.last_alpha for g in self.gates]

    def clear_caches(self) -> None:
        for m in self.modules():
            clear = getattr(m, "clear_cache", None)
            if clear is not None:
                clear()


def count_params(model: Module) -> int:
    return model.num_parameters()


@dataclass
class EnsembleSpec:
    members: list = field(default_factory=list)

    def __post_init__(self):
        if not self.members:
            raise ContractError("an ensemble needs at least one member")

    @property
    def kinds(self) -> list[tuple[str, str]]:
        return [(m.config.encoder_kind, m.config.aggregator_kind) for m in self.members]


def ensemble_predict(spec: EnsembleSpec, images) -> np.ndarray | float:
    """Arithmetic mean of the members' predictions."""
    if not spec.members:
        raise ContractError("an ensemble needs at least one member")
    images = np.asarray(images, dtype=np.float64)
    preds = [m.predict(images) for m in spec.members]
    total = preds[0].copy()
    for p in preds[1:]:
        total = total + p
    mean = total / len(preds)
    return float(mean[0]) if images.ndim == 3 else mean
