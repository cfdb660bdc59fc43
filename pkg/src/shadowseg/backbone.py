"""Frozen image/text encoders behind a uniform interface.

Real pretrained encoders are consumed through :class:`EncoderAdapter`
implementations registered by name; the bundled :class:`ToyEncoder` is a
deterministic, bias-free seeded linear map used for desk-scale testing.
Nothing in this module exposes trainable parameters.
"""

from __future__ import annotations

import hashlib
from dataclasses import dataclass, field

import numpy as np
import torch

from .errors import AssetMissingError, ConfigurationError, InputError

# Per-level seed stride for the toy encoder; any large odd constant works.
_LEVEL_SEED_STRIDE = 1_000_003


@dataclass(frozen=True)
class BackboneConfig:
    """Geometry and seeding of the frozen encoder pair.

    Defaults match a ViT-L-scale image tower (patch 16, width 1024) paired
    with a 768-wide text tower; ``toy_config`` shrinks everything for tests.
    """

    image_size: int = 512
    patch_size: int = 16
    feature_dim: int = 1024
    text_dim: int = 768
    selected_layers: tuple[int, ...] = (5, 11, 17, 23)
    shallow_layer: int = 2
    seed: int = 0

    def __post_init__(self):
        if self.image_size <= 0 or self.patch_size <= 0:
            raise ConfigurationError("image_size and patch_size must be positive")
        if self.image_size % self.patch_size != 0:
            raise ConfigurationError(
                f"image_size {self.image_size} not divisible by patch_size {self.patch_size}"
            )
        if self.feature_dim <= 0 or self.text_dim <= 0:
            raise ConfigurationError("feature_dim and text_dim must be positive")
        layers = tuple(self.selected_layers)
        if not layers:
            raise ConfigurationError("selected_layers must be non-empty")
        if any(b <= a for a, b in zip(layers, layers[1:])):
            raise ConfigurationError(f"selected_layers must be strictly increasing: {layers}")
        if self.shallow_layer >= min(layers):
            raise ConfigurationError(
                f"shallow_layer {self.shallow_layer} must precede selected_layers {layers}"
            )
        object.__setattr__(self, "selected_layers", layers)

    @property
    def grid_size(self) -> int:
        return self.image_size // self.patch_size

    @property
    def num_patches(self) -> int:
        return self.grid_size ** 2

    @property
    def num_levels(self) -> int:
        return len(self.selected_layers)


def toy_config(**overrides) -> BackboneConfig:
    """Desk-scale config: 64px images, 8px patches, narrow feature widths."""
    defaults = dict(
        image_size=64,
        patch_size=8,
        feature_dim=32,
        text_dim=24,
        selected_layers=(1, 2, 3, 4),
        shallow_layer=0,
        seed=0,
    )
    defaults.update(overrides)
    return BackboneConfig(**defaults)


@dataclass
class LevelTokens:
    """Tokens of one selected layer: global summary + per-patch grid."""

    cls: torch.Tensor      # [D]
    patches: torch.Tensor  # [N, D]


@dataclass
class TokenPyramid:
    """Multi-level tokens plus one shallow skip patch grid."""

    levels: list[LevelTokens]
    shallow_patches: torch.Tensor  # [N, D]

    def validate(self) -> "TokenPyramid":
        if not self.levels:
            raise ConfigurationError("token pyramid has no levels")
        n, d = self.levels[0].patches.shape
        for i, lvl in enumerate(self.levels):
            if lvl.patches.shape != (n, d) or lvl.cls.shape != (d,):
                raise ConfigurationError(f"level {i} token shapes inconsistent")
            if not (torch.isfinite(lvl.cls).all() and torch.isfinite(lvl.patches).all()):
                raise InputError(f"level {i} tokens contain non-finite values")
        if self.shallow_patches.shape != (n, d):
            raise ConfigurationError("shallow patch grid shape inconsistent with levels")
        if not torch.isfinite(self.shallow_patches).all():
            raise InputError("shallow patch tokens contain non-finite values")
        return self

    @property
    def num_patches(self) -> int:
        return self.levels[0].patches.shape[0]

    @property
    def feature_dim(self) -> int:
        return self.levels[0].patches.shape[1]


@dataclass
class TextReference:
    """Raw prompt strings and their frozen embedding."""

    prompts: list[str]
    embedding: torch.Tensor  # [D_t]

    def validate(self) -> "TextReference":
        if not self.prompts:
            raise InputError("text reference needs at least one prompt")
        if not torch.isfinite(self.embedding).all():
            raise InputError("text embedding contains non-finite values")
        return self


class EncoderAdapter:
    """Interface every frozen encoder pair implements.

    Implementations own weight loading and preprocessing; callers only see
    arrays in, tokens out. Adapters must be pure and thread-safe after
    construction.
    """

    config: BackboneConfig

    def encode_image(self, image: np.ndarray) -> TokenPyramid:
        raise NotImplementedError

    def encode_text(self, prompts: list[str]) -> torch.Tensor:
        raise NotImplementedError

    def state_checksum(self) -> str:
        """Digest over all encoder weights; must be constant across a training run."""
        raise NotImplementedError


def _check_image(image: np.ndarray, config: BackboneConfig) -> np.ndarray:
    image = np.asarray(image, dtype=np.float64)
    s = config.image_size
    if image.shape != (s, s, 3):
        raise ConfigurationError(
            f"expected image of shape ({s}, {s}, 3), got {tuple(image.shape)}"
        )
    if image.min() < -1e-9 or image.max() > 1 + 1e-9:
        raise InputError("pixel values must lie in [0, 1]")
    return image


class ToyEncoder(EncoderAdapter):
    """Seeded, bias-free linear toy encoder.

    Each level maps non-overlapping patch pixel blocks through a fixed random
    matrix; the level's global token is the mean patch token pushed through a
    second fixed matrix. Linearity makes scaling/zero-input behavior exactly
    predictable, which the tests exploit.
    """

    def __init__(self, config: BackboneConfig):
        self.config = config
        block_dim = config.patch_size * config.patch_size * 3
        levels = sorted(set(config.selected_layers) | {config.shallow_layer})
        self._patch_maps: dict[int, torch.Tensor] = {}
        self._cls_maps: dict[int, torch.Tensor] = {}
        for level in levels:
            gen = torch.Generator().manual_seed(config.seed * _LEVEL_SEED_STRIDE + level)
            w = torch.randn(block_dim, config.feature_dim, generator=gen, dtype=torch.float64)
            self._patch_maps[level] = w / np.sqrt(block_dim)
            wc = torch.randn(config.feature_dim, config.feature_dim, generator=gen,
                             dtype=torch.float64)
            self._cls_maps[level] = wc / np.sqrt(config.feature_dim)

    def _blocks(self, image: np.ndarray) -> torch.Tensor:
        p = self.config.patch_size
        g = self.config.grid_size
        blocks = image.reshape(g, p, g, p, 3).transpose(0, 2, 1, 3, 4).reshape(g * g, -1)
        return torch.from_numpy(np.ascontiguousarray(blocks))

    def encode_image(self, image: np.ndarray) -> TokenPyramid:
        image = _check_image(image, self.config)
        blocks = self._blocks(image)
        levels = []
        for layer in self.config.selected_layers:
            patches = blocks @ self._patch_maps[layer]
            cls = patches.mean(dim=0) @ self._cls_maps[layer]
            levels.append(LevelTokens(cls=cls, patches=patches))
        shallow = blocks @ self._patch_maps[self.config.shallow_layer]
        return TokenPyramid(levels=levels, shallow_patches=shallow).validate()

    def encode_text(self, prompts: list[str]) -> torch.Tensor:
        if not prompts:
            raise InputError("prompt list is empty")
        vectors = []
        for prompt in prompts:
            digest = hashlib.sha256(
                f"{self.config.seed}:{prompt}".encode("utf-8")
            ).digest()
            gen = torch.Generator().manual_seed(int.from_bytes(digest[:8], "big") >> 1)
            v = torch.randn(self.config.text_dim, generator=gen, dtype=torch.float64)
            vectors.append(v / v.norm())
        mean = torch.stack(vectors).mean(dim=0)
        return mean / mean.norm()

    def state_checksum(self) -> str:
        h = hashlib.sha256()
        for level in sorted(self._patch_maps):
            h.update(self._patch_maps[level].numpy().tobytes())
            h.update(self._cls_maps[level].numpy().tobytes())
        return h.hexdigest()


# Registry of adapter factories for real encoder pairs. A factory receives
# (config, image_weights, text_weights) and returns an EncoderAdapter.
_ADAPTERS: dict[str, object] = {}


def register_adapter(name: str, factory) -> None:
    _ADAPTERS[name] = factory


def available_adapters() -> list[str]:
    return ["toy"] + sorted(_ADAPTERS)


def build_encoder(config: BackboneConfig, kind: str = "toy",
                  image_weights: str | None = None,
                  text_weights: str | None = None) -> EncoderAdapter:
    """Construct the frozen encoder pair named by ``kind``.

    Non-toy kinds must have been registered via :func:`register_adapter`;
    their weight files are checked for existence before the factory runs.
    """
    if kind == "toy":
        return ToyEncoder(config)
    if kind not in _ADAPTERS:
        raise ConfigurationError(
            f"unknown encoder kind {kind!r}; available: {', '.join(available_adapters())}"
        )
    import os

    for path, what in ((image_weights, "image encoder weights"),
                       (text_weights, "text encoder weights")):
        if path is None:
            raise ConfigurationError(f"encoder kind {kind!r} requires a path for {what}")
        if not os.path.exists(path):
            raise AssetMissingError(path, what)
    return _ADAPTERS[kind](config, image_weights, text_weights)


def toy_encode(image: np.ndarray, config: BackboneConfig) -> TokenPyramid:
    """Functional wrapper: run the toy encoder on one image."""
    return ToyEncoder(config).encode_image(image)


def extract_token_pyramid(image: np.ndarray, config: BackboneConfig,
                          encoder: EncoderAdapter | None = None) -> TokenPyramid:
    """Extract multi-level tokens through the given (or toy) frozen encoder."""
    if encoder is None:
        encoder = ToyEncoder(config)
    return encoder.encode_image(image).validate()


def encode_text(prompts: list[str], config: BackboneConfig,
                encoder: EncoderAdapter | None = None) -> TextReference:
    """Embed shadow-describing prompts through the frozen text encoder.

    Multiple prompts are averaged and renormalized to unit length by the toy
    encoder; real adapters return their own ensemble convention unchanged.
    """
    if not prompts:
        raise InputError("prompt list is empty")
    if encoder is None:
        encoder = ToyEncoder(config)
    embedding = encoder.encode_text(list(prompts))
    return TextReference(prompts=list(prompts), embedding=embedding).validate()
