"""Model hyperparameters and named presets."""
from __future__ import annotations

import dataclasses
import math
from dataclasses import dataclass

MIXER_KINDS = ("STM", "MSA", "CONV2", "CONV3", "NONE")


class ConfigError(ValueError):
    """Invalid configuration; ``field`` names the offending setting."""

    def __init__(self, field: str, message: str):
        super().__init__(f"{field}: {message}")
        self.field = field


@dataclass(frozen=True)
class ModelConfig:
    image_height: int = 224
    image_width: int = 224
    in_channels: int = 3
    patch_size: int = 8
    embed_dim: int = 384
    depth: int = 25
    class_layers: int = 2
    heads: int = 8
    window: int = 7
    ffn_ratio: float = 4.0
    mixer: str = "STM"
    g_start: int = 6
    layerscale_init: float = 1e-5
    stm_hidden: int = 0  # 0 means embed_dim // 2
    num_classes: int = 1000
    stem_channels: tuple[int, int, int] = (32, 64, 64)
    stm_alternate: bool = False  # apply the mixer every other block from g_start
    super_pos: bool = True  # add positional embeddings to Super tokens too
    final_norm: bool = False  # LayerNorm on CLS before the head

    def __post_init__(self):
        object.__setattr__(self, "mixer", str(self.mixer).upper())
        object.__setattr__(self, "stem_channels", tuple(int(c) for c in self.stem_channels))
        self.validate()

    def validate(self) -> None:
        for name in ("image_height", "image_width", "in_channels", "patch_size", "embed_dim",
                     "depth", "class_layers", "heads", "window", "num_classes"):
            if int(getattr(self, name)) < 1:
                raise ConfigError(name, "must be a positive integer")
        p = self.patch_size
        if p % 4:
            raise ConfigError("patch_size", f"{p} must be a multiple of 4 (stem strides 2 and P/2)")
        if self.image_height % p or self.image_width % p:
            raise ConfigError("patch_size",
                              f"image {self.image_height}x{self.image_width} not divisible by patch size {p}")
        gh, gw = self.image_height // p, self.image_width // p
        if gh % self.window or gw % self.window:
            raise ConfigError("window", f"token grid {gh}x{gw} not divisible by window {self.window}")
        if self.embed_dim % self.heads:
            raise ConfigError("heads", f"embed_dim {self.embed_dim} not divisible by heads {self.heads}")
        if not 1 <= self.g_start <= self.depth:
            raise ConfigError("g_start", f"{self.g_start} outside [1, depth={self.depth}]")
        if self.mixer not in MIXER_KINDS:
            raise ConfigError("mixer", f"{self.mixer!r} not one of {', '.join(MIXER_KINDS)}")
        if self.mixer.startswith("CONV"):
            wh, ww = gh // self.window, gw // self.window
            if wh != ww or math.isqrt(self.num_windows) ** 2 != self.num_windows:
                raise ConfigError("mixer", f"{self.mixer} needs a square Super-token grid, got {wh}x{ww}")
        if self.ffn_ratio <= 0 or self.ffn_hidden < 1:
            raise ConfigError("ffn_ratio", "must give a positive hidden width")
        if self.stm_hidden < 0:
            raise ConfigError("stm_hidden", "must be >= 0")
        if len(self.stem_channels) != 3 or min(self.stem_channels) < 1:
            raise ConfigError("stem_channels", "need three positive channel counts")

    # derived quantities -------------------------------------------------
    @property
    def grid_h(self) -> int:
        return self.image_height // self.patch_size

    @property
    def grid_w(self) -> int:
        return self.image_width // self.patch_size

    @property
    def num_tokens(self) -> int:
        return self.grid_h * self.grid_w

    @property
    def window_grid(self) -> tuple[int, int]:
        return self.grid_h // self.window, self.grid_w // self.window

    @property
    def num_windows(self) -> int:
        wh, ww = self.window_grid
        return wh * ww

    @property
    def window_tokens(self) -> int:
        return self.window * self.window

    @property
    def head_dim(self) -> int:
        return self.embed_dim // self.heads

    @property
    def ffn_hidden(self) -> int:
        return int(round(self.ffn_ratio * self.embed_dim))

    @property
    def stm_channel_hidden(self) -> int:
        return self.stm_hidden or self.embed_dim // 2

    @property
    def stem_layers(self) -> list[tuple[int, int, int, int, int]]:
        """(c_in, c_out, kernel, stride, pad) for the four stem convolutions."""
        c0, c1, c2 = self.stem_channels
        p = self.patch_size
        return [
            (self.in_channels, c0, 7, 2, 3),
            (c0, c1, 3, 1, 1),
            (c1, c2, 3, 1, 1),
            (c2, self.embed_dim, p, p // 2, p // 4),
        ]

    def mixer_active(self, layer: int) -> bool:
        """Whether the global mixer follows encoder layer ``layer`` (1-based)."""
        if self.mixer == "NONE" or layer < self.g_start:
            return False
        return not self.stm_alternate or (layer - self.g_start) % 2 == 0

    def replace(self, **changes) -> "ModelConfig":
        return dataclasses.replace(self, **changes)

    def to_dict(self) -> dict:
        return dataclasses.asdict(self)


def _variant(depth: int, heads: int, dim: int) -> ModelConfig:
    # channel-mixing width D/4 keeps XXS25 and S25 near 12M and 49M parameters
    return ModelConfig(depth=depth, heads=heads, embed_dim=dim, stm_hidden=dim // 4)


PRESETS: dict[str, ModelConfig] = {
    "stt-xxs25": _variant(25, 4, 192),
    "stt-xxs37": _variant(37, 4, 192),
    "stt-s25": _variant(25, 8, 384),
    "stt-s37": _variant(37, 8, 384),
    "stt-m25": _variant(25, 16, 768),
    "stt-m37": _variant(37, 16, 768),
    # 32x32 inputs, 4x4 token grid, 2x2 windows -> 4 Super tokens
    "desk": ModelConfig(image_height=32, image_width=32, patch_size=8, window=2, embed_dim=128,
                        heads=4, depth=8, g_start=3, num_classes=10),
    # smallest config exercising every mechanism; used for whole-model gradient checks
    "tiny": ModelConfig(image_height=32, image_width=32, patch_size=8, window=2, embed_dim=16,
                        heads=2, depth=3, g_start=2, num_classes=3, stem_channels=(4, 8, 8)),
}


def preset(name: str, **overrides) -> ModelConfig:
    try:
        base = PRESETS[name.lower()]
    except KeyError:
        raise ConfigError("preset", f"unknown preset {name!r}; known: {', '.join(PRESETS)}") from None
    return base.replace(**overrides) if overrides else base
