"""Model assembly: stage configs, presets, the two-image forward pass.

A model is a stack of stages; each stage is a strided-conv patch embedding
followed by `depth` extract-or-correlate blocks.  Template and search
images run through the same weights ("one stream in structure, two streams
in data flow"); blocks listed in `ca_positions` correlate the branches,
all others extract within a branch.  The fused search features feed two
mix-MLP prediction heads: a 1-channel foreground map and a 4-channel
left/top/right/bottom distance map, both through a sigmoid.
"""

from __future__ import annotations

from dataclasses import dataclass, field, replace

import numpy as np

from . import blocks as bl
from . import engine as eg
from .blocks import CA, SA, AttnConfig, BlockWeights, FeatureMap, HeadWeights, PatchEmbedWeights
from .engine import ShapeError, Tensor


class ConfigError(ValueError):
    """Raised for inconsistent model configurations."""


@dataclass(frozen=True)
class StageConfig:
    """One stage: patch embedding geometry plus its block stack."""

    kernel: int
    channels: int
    stride: int
    depth: int
    heads: int
    reduction: int
    ca_positions: tuple[int, ...] = ()

    def __post_init__(self):
        object.__setattr__(self, "ca_positions", tuple(sorted(self.ca_positions)))

    @property
    def attn(self) -> AttnConfig:
        return AttnConfig(dim=self.channels, heads=self.heads, reduction=self.reduction)


@dataclass(frozen=True)
class ModelConfig:
    name: str
    stages: tuple[StageConfig, ...]
    template_size: int = 128
    search_size: int = 256
    head_depth: int = 2
    pad_mode: str = "zeros"
    num_classes: int = 0  # > 0 selects the single-branch classification variant
    head_input: str = "search"  # "search" | "dwcorr" (Siamese-style baseline head)

    def __post_init__(self):
        object.__setattr__(self, "stages", tuple(self.stages))

    @property
    def total_stride(self) -> int:
        s = 1
        for st in self.stages:
            s *= st.stride
        return s

    @property
    def is_classifier(self) -> bool:
        return self.num_classes > 0

    def search_grid(self) -> tuple[int, int]:
        g = self.search_size // self.total_stride
        return (g, g)

    def template_grid(self) -> tuple[int, int]:
        g = self.template_size // self.total_stride
        return (g, g)

    def validate(self) -> None:
        if not self.stages:
            raise ConfigError("at least one stage required")
        if self.pad_mode not in ("zeros", "circular"):
            raise ConfigError(f"pad_mode must be zeros/circular, got {self.pad_mode!r}")
        if self.head_input not in ("search", "dwcorr"):
            raise ConfigError(f"head_input must be search/dwcorr, got {self.head_input!r}")
        for i, st in enumerate(self.stages, 1):
            if st.stride not in (1, 2, 4):
                raise ConfigError(f"stage {i}: stride must be 1, 2 or 4")
            if st.kernel % 2 == 0 or st.kernel < st.stride:
                raise ConfigError(f"stage {i}: kernel must be odd and >= stride")
            if st.depth < 1:
                raise ConfigError(f"stage {i}: depth must be >= 1")
            bad = [p for p in st.ca_positions if not 1 <= p <= st.depth]
            if bad:
                raise ConfigError(f"stage {i}: ca_positions {bad} outside 1..{st.depth}")
            st.attn  # raises on dim/head inconsistency
        if self.is_classifier:
            if any(st.ca_positions for st in self.stages):
                raise ConfigError("classification variant runs one branch; ca_positions must be empty")
        else:
            for size, label in ((self.template_size, "template"), (self.search_size, "search")):
                grid = size
                for i, st in enumerate(self.stages, 1):
                    if grid % st.stride:
                        raise ConfigError(f"{label} size {size}: stage {i} stride does not divide grid {grid}")
                    grid //= st.stride
                    if st.reduction > 1 and grid % st.reduction:
                        raise ConfigError(
                            f"{label} size {size}: stage {i} reduction {st.reduction} does not divide grid {grid}")


# -- presets -----------------------------------------------------------------

_STAGE4 = {
    "light": StageConfig(kernel=3, channels=256, stride=2, depth=2, heads=8, reduction=1),
    "small": StageConfig(kernel=3, channels=512, stride=2, depth=2, heads=8, reduction=1),
    "base": StageConfig(kernel=3, channels=512, stride=2, depth=2, heads=8, reduction=1),
    "large": StageConfig(kernel=3, channels=512, stride=2, depth=2, heads=8, reduction=1),
}


def _tracking_stages(name: str) -> tuple[StageConfig, ...]:
    if name == "light":
        return (
            StageConfig(kernel=7, channels=32, stride=4, depth=2, heads=1, reduction=8),
            StageConfig(kernel=3, channels=64, stride=2, depth=2, heads=2, reduction=4),
            StageConfig(kernel=3, channels=160, stride=1, depth=6, heads=5, reduction=2,
                        ca_positions=(2, 4, 6)),
        )
    if name == "small":
        return (
            StageConfig(kernel=7, channels=64, stride=4, depth=2, heads=1, reduction=8),
            StageConfig(kernel=3, channels=128, stride=2, depth=2, heads=2, reduction=4),
            StageConfig(kernel=3, channels=320, stride=1, depth=6, heads=5, reduction=2,
                        ca_positions=(2, 4, 6)),
        )
    if name == "base":
        return (
            StageConfig(kernel=7, channels=64, stride=4, depth=3, heads=1, reduction=8),
            StageConfig(kernel=3, channels=128, stride=2, depth=4, heads=2, reduction=4),
            StageConfig(kernel=3, channels=320, stride=1, depth=10, heads=5, reduction=2,
                        ca_positions=(2, 4, 6, 8, 10)),
        )
    if name == "large":
        return (
            StageConfig(kernel=7, channels=64, stride=4, depth=3, heads=1, reduction=8),
            StageConfig(kernel=3, channels=128, stride=2, depth=4, heads=2, reduction=4),
            StageConfig(kernel=3, channels=320, stride=1, depth=18, heads=5, reduction=2,
                        ca_positions=(6, 8, 10, 12, 14, 16, 18)),
        )
    raise ConfigError(f"unknown preset {name!r}")


def light_config(**overrides) -> ModelConfig:
    return ModelConfig(name="light", stages=_tracking_stages("light"), **overrides)


def small_config(**overrides) -> ModelConfig:
    return ModelConfig(name="small", stages=_tracking_stages("small"), **overrides)


def base_config(**overrides) -> ModelConfig:
    return ModelConfig(name="base", stages=_tracking_stages("base"), **overrides)


def large_config(**overrides) -> ModelConfig:
    return ModelConfig(name="large", stages=_tracking_stages("large"), **overrides)


def tiny_config(**overrides) -> ModelConfig:
    """Desk-scale variant for fast tests (not one of the published scales)."""
    stages = (
        StageConfig(kernel=7, channels=16, stride=4, depth=1, heads=1, reduction=4),
        StageConfig(kernel=3, channels=32, stride=2, depth=1, heads=2, reduction=2),
        StageConfig(kernel=3, channels=64, stride=1, depth=4, heads=4, reduction=2,
                    ca_positions=(2, 4)),
    )
    kw = dict(template_size=64, search_size=128)
    kw.update(overrides)
    return ModelConfig(name="tiny", stages=stages, **kw)


def classifier_config(name: str, num_classes: int, image_size: int = 224) -> ModelConfig:
    """Four-stage single-branch variant for classification pre-training."""
    if name == "tiny":
        base_stages = tiny_config().stages
        stage4 = StageConfig(kernel=3, channels=128, stride=2, depth=2, heads=4, reduction=1)
    else:
        base_stages = _tracking_stages(name)
        stage4 = _STAGE4[name]
    stages = tuple(replace(st, ca_positions=()) for st in base_stages) + (stage4,)
    return ModelConfig(name=f"{name}-cls", stages=stages, template_size=image_size,
                       search_size=image_size, num_classes=num_classes)


def with_reduction(cfg: ModelConfig, r: int) -> ModelConfig:
    """Same architecture with every stage's key/value reduction set to `r`."""
    return replace(cfg, stages=tuple(replace(st, reduction=r) for st in cfg.stages))


def without_cross_attention(cfg: ModelConfig) -> ModelConfig:
    """Pure two-stream variant: no block mixes the branches."""
    return replace(cfg, stages=tuple(replace(st, ca_positions=()) for st in cfg.stages))


PRESETS = {
    "tiny": tiny_config,
    "light": light_config,
    "small": small_config,
    "base": base_config,
    "large": large_config,
}


# -- model -------------------------------------------------------------------


@dataclass
class StageWeights:
    patch: PatchEmbedWeights
    blocks: list[BlockWeights]


@dataclass
class Model:
    config: ModelConfig
    stages: list[StageWeights]
    cls_head: HeadWeights | None = None
    reg_head: HeadWeights | None = None
    classifier_weight: Tensor | None = None
    classifier_bias: Tensor | None = None
    dtype: type = np.float32

    def named_parameters(self) -> dict[str, Tensor]:
        out: dict[str, Tensor] = {}
        for si, sw in enumerate(self.stages, 1):
            for fname, t in vars(sw.patch).items():
                out[f"stage{si}.patch.{fname}"] = t
            for bi, bw in enumerate(sw.blocks, 1):
                for fname, t in vars(bw).items():
                    if t is not None:
                        out[f"stage{si}.block{bi}.{fname}"] = t
        for head_name, head in (("cls", self.cls_head), ("reg", self.reg_head)):
            if head is None:
                continue
            for mi, mw in enumerate(head.blocks, 1):
                for fname, t in vars(mw).items():
                    out[f"head.{head_name}.mmb{mi}.{fname}"] = t
            out[f"head.{head_name}.out_weight"] = head.out_weight
            out[f"head.{head_name}.out_bias"] = head.out_bias
        if self.classifier_weight is not None:
            out["classifier.weight"] = self.classifier_weight
            out["classifier.bias"] = self.classifier_bias
        return out

    def parameters(self) -> list[Tensor]:
        return list(self.named_parameters().values())


def parameter_count(model: Model) -> int:
    return sum(t.size for t in model.parameters())


def backbone_parameter_count(model: Model) -> int:
    """Stage parameters only (patch embeddings + blocks, no heads)."""
    return sum(t.size for name, t in model.named_parameters().items() if name.startswith("stage"))


def build_model(config: ModelConfig, seed: int = 0, dtype=np.float32) -> Model:
    """Deterministic construction: truncated-normal weights with std 0.02
    clipped at two sigma, zero biases, unit layer-norm gains.  Head spatial
    mixing starts at identity (see blocks.init_mix_mlp)."""
    config.validate()
    rng = np.random.default_rng(seed)
    stages: list[StageWeights] = []
    c_in = 3
    for st in config.stages:
        patch = bl.init_patch_embed(rng, c_in, st.channels, st.kernel, dtype=dtype)
        blocks = [bl.init_block_weights(rng, st.attn, dtype=dtype) for _ in range(st.depth)]
        stages.append(StageWeights(patch=patch, blocks=blocks))
        c_in = st.channels
    model = Model(config=config, stages=stages, dtype=dtype)
    if config.is_classifier:
        model.classifier_weight = eg.parameter(
            eg.truncated_normal(rng, (c_in, config.num_classes), std=0.02, dtype=dtype))
        model.classifier_bias = eg.parameter(np.zeros(config.num_classes, dtype=dtype))
    else:
        hs, ws = config.search_grid()
        n_tokens = hs * ws
        model.cls_head = bl.init_head(rng, c_in, n_tokens, config.head_depth, 1, dtype=dtype)
        model.reg_head = bl.init_head(rng, c_in, n_tokens, config.head_depth, 4, dtype=dtype)
    return model


# -- forward -----------------------------------------------------------------


def _check_image(img, size: int, what: str) -> None:
    if tuple(img.shape) != (3, size, size):
        raise ShapeError(f"{what} image must be (3, {size}, {size}), got {tuple(img.shape)}")


def _as_input(img, dtype) -> Tensor:
    if isinstance(img, Tensor):
        return img
    return eg.tensor(np.asarray(img), dtype=dtype)


def run_backbone(model: Model, z, x, pad_kind: str | None = None, trace: dict | None = None,
                 ) -> tuple[FeatureMap, FeatureMap]:
    """Run both branches through all stages; optionally record per-block
    feature snapshots keyed by ('embed', stage, branch) and
    ('block', stage, block, branch)."""
    cfg = model.config
    pad_kind = pad_kind or cfg.pad_mode
    z = _as_input(z, model.dtype)
    x = _as_input(x, model.dtype)
    fz: FeatureMap | Tensor = z
    fx: FeatureMap | Tensor = x
    for si, (st, sw) in enumerate(zip(cfg.stages, model.stages), 1):
        zin = fz.tensor if isinstance(fz, FeatureMap) else fz
        xin = fx.tensor if isinstance(fx, FeatureMap) else fx
        fz = bl.patch_embed(zin, sw.patch, st.stride, pad_kind)
        fx = bl.patch_embed(xin, sw.patch, st.stride, pad_kind)
        if trace is not None:
            trace[("embed", si, "z")] = fz.tensor.data.copy()
            trace[("embed", si, "x")] = fx.tensor.data.copy()
        for bi, bw in enumerate(sw.blocks, 1):
            mode = CA if bi in st.ca_positions else SA
            fz, fx = bl.eoc_block(fz, fx, mode, st.attn, bw, pad_kind)
            if trace is not None:
                trace[("block", si, bi, "z")] = fz.tensor.data.copy()
                trace[("block", si, bi, "x")] = fx.tensor.data.copy()
    return fz, fx


def resume_backbone(model: Model, fz: FeatureMap, fx: FeatureMap, stage: int, block: int,
                    pad_kind: str | None = None) -> tuple[FeatureMap, FeatureMap]:
    """Continue the stage loop from the snapshot taken right after
    (stage, block), both 1-based."""
    cfg = model.config
    pad_kind = pad_kind or cfg.pad_mode
    for si, (st, sw) in enumerate(zip(cfg.stages, model.stages), 1):
        if si < stage:
            continue
        if si > stage:
            fz = bl.patch_embed(fz.tensor, sw.patch, st.stride, pad_kind)
            fx = bl.patch_embed(fx.tensor, sw.patch, st.stride, pad_kind)
        for bi, bw in enumerate(sw.blocks, 1):
            if si == stage and bi <= block:
                continue
            mode = CA if bi in st.ca_positions else SA
            fz, fx = bl.eoc_block(fz, fx, mode, st.attn, bw, pad_kind)
    return fz, fx


def _crop_template_odd(fz: FeatureMap, max_side: int = 7) -> FeatureMap:
    """Center-crop template features to an odd spatial extent (<= max_side)
    so the correlation head can pad symmetrically."""
    h, w = fz.grid
    side = min(max_side, h if h % 2 else h - 1, w if w % 2 else w - 1)
    r0 = (h - side) // 2
    c0 = (w - side) // 2
    return FeatureMap(fz.tensor[:, r0 : r0 + side, c0 : c0 + side])


def run_heads(model: Model, fz: FeatureMap, fx: FeatureMap) -> tuple[Tensor, Tensor]:
    if model.config.head_input == "dwcorr":
        zc = _crop_template_odd(fz)
        pad = eg.PadMode.zeros((zc.grid[0] - 1) // 2)
        head_in = FeatureMap(eg.depthwise_xcorr(zc.tensor, fx.tensor, pad=pad))
    else:
        head_in = fx
    cls = eg.sigmoid(bl.head_forward(head_in, model.cls_head))
    reg = eg.sigmoid(bl.head_forward(head_in, model.reg_head))
    return cls, reg


def forward(model: Model, z, x, pad_kind: str | None = None, trace: dict | None = None,
            ) -> tuple[Tensor, Tensor]:
    """Two-image pass: template z, search x -> (foreground map [1,hs,ws],
    normalized l/t/r/b distance map [4,hs,ws]), both sigmoid-squashed."""
    cfg = model.config
    if cfg.is_classifier:
        raise ConfigError("classification variant has no tracking heads")
    _check_image(z, cfg.template_size, "template")
    _check_image(x, cfg.search_size, "search")
    fz, fx = run_backbone(model, z, x, pad_kind, trace)
    return run_heads(model, fz, fx)


def forward_classification(model: Model, img, pad_kind: str | None = None) -> Tensor:
    """Single-branch pass for the four-stage variant: global average pool of
    the last stage then a linear classifier; returns logits."""
    cfg = model.config
    if not cfg.is_classifier:
        raise ConfigError("model was not built with num_classes > 0")
    if len(cfg.stages) != 4:
        raise ConfigError("classification pre-training expects a 4-stage config")
    pad_kind = pad_kind or cfg.pad_mode
    img = _as_input(img, model.dtype)
    if img.ndim != 3 or img.shape[0] != 3:
        raise ShapeError(f"expected a (3, H, W) image, got {tuple(img.shape)}")
    f: FeatureMap | Tensor = img
    for st, sw in zip(cfg.stages, model.stages):
        f = bl.patch_embed(f.tensor if isinstance(f, FeatureMap) else f, sw.patch, st.stride, pad_kind)
        for bw in sw.blocks:
            f = bl.eoc_block_single(f, st.attn, bw, pad_kind)
    pooled = eg.mean_(eg.reshape(f.tensor, (f.channels, f.token_count)), axis=1)
    return eg.linear(eg.reshape(pooled, (1, f.channels)), model.classifier_weight,
                     model.classifier_bias)[0, :]


# -- config serialization ------------------------------------------------------


def config_to_dict(cfg: ModelConfig) -> dict:
    return {
        "name": cfg.name,
        "template_size": cfg.template_size,
        "search_size": cfg.search_size,
        "head_depth": cfg.head_depth,
        "pad_mode": cfg.pad_mode,
        "num_classes": cfg.num_classes,
        "head_input": cfg.head_input,
        "stages": [
            {
                "kernel": st.kernel,
                "channels": st.channels,
                "stride": st.stride,
                "depth": st.depth,
                "heads": st.heads,
                "reduction": st.reduction,
                "ca_positions": list(st.ca_positions),
            }
            for st in cfg.stages
        ],
    }


def config_from_dict(d: dict) -> ModelConfig:
    try:
        stages = tuple(
            StageConfig(
                kernel=int(s["kernel"]),
                channels=int(s["channels"]),
                stride=int(s["stride"]),
                depth=int(s["depth"]),
                heads=int(s["heads"]),
                reduction=int(s["reduction"]),
                ca_positions=tuple(int(p) for p in s.get("ca_positions", ())),
            )
            for s in d["stages"]
        )
        cfg = ModelConfig(
            name=str(d.get("name", "custom")),
            stages=stages,
            template_size=int(d.get("template_size", 128)),
            search_size=int(d.get("search_size", 256)),
            head_depth=int(d.get("head_depth", 2)),
            pad_mode=str(d.get("pad_mode", "zeros")),
            num_classes=int(d.get("num_classes", 0)),
            head_input=str(d.get("head_input", "search")),
        )
    except (KeyError, TypeError, ValueError) as exc:
        raise ConfigError(f"malformed model config: {exc}") from exc
    cfg.validate()
    return cfg


def config_to_text(cfg: ModelConfig) -> str:
    import yaml

    return yaml.safe_dump(config_to_dict(cfg), sort_keys=False)


def config_from_text(text: str) -> ModelConfig:
    import yaml

    d = yaml.safe_load(text)
    if not isinstance(d, dict):
        raise ConfigError("config text must hold a mapping")
    return config_from_dict(d)


def load_config(path) -> ModelConfig:
    with open(path, "r", encoding="utf-8") as fh:
        return config_from_text(fh.read())


def save_config(cfg: ModelConfig, path) -> None:
    with open(path, "w", encoding="utf-8") as fh:
        fh.write(config_to_text(cfg))
