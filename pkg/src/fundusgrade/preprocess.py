"""Deterministic image preparation.

Pipeline order is fixed: decode -> bilinear resize -> min-max intensity
scaling to [0, 1] -> per-channel standardization. Test-time augmentation
extracts ten 224x224 crops (four corners + center of the image and of its
horizontal mirror, in that order).

Bilinear sampling uses the half-pixel-center convention: the source
coordinate for output pixel x is (x + 0.5) * (in / out) - 0.5, clamped to
the source frame. The same convention is used by the scalar reference
implementation in the test suite; changing it silently would invalidate
every frozen expected value.
"""

from __future__ import annotations

from dataclasses import dataclass, field, replace
from pathlib import Path

import numpy as np
from PIL import Image

from .errors import ConfigError, InvalidInputError

CROP_SIZE = 224
RESIZE_FOR_CROPS = 256

STAGE_MINMAX = "minmax"
STAGE_STANDARDIZED = "standardized"

# PIL modes that decode to more than 8 bits per sample; rejected up front.
_DEEP_MODES = ("I", "I;16", "I;16B", "I;16L", "I;16N", "F")


@dataclass(frozen=True)
class RawImage:
    """Decoded fundus photograph: H x W x 3 intensities in [0, 255]."""

    pixels: np.ndarray
    source: str | None = None

    def __post_init__(self):
        px = np.asarray(self.pixels)
        if px.ndim != 3 or px.shape[2] != 3:
            raise InvalidInputError(
                f"expected an HxWx3 image, got shape {px.shape}"
            )
        if px.shape[0] < 1 or px.shape[1] < 1:
            raise InvalidInputError("empty image")
        if px.dtype != np.uint8:
            px = px.astype(np.float64, copy=False)
            if not np.isfinite(px).all():
                raise InvalidInputError("image contains non-finite values")
            if px.min() < 0 or px.max() > 255:
                raise InvalidInputError("intensities must lie in [0, 255]")
        object.__setattr__(self, "pixels", px)

    @property
    def height(self) -> int:
        return self.pixels.shape[0]

    @property
    def width(self) -> int:
        return self.pixels.shape[1]


@dataclass(frozen=True)
class TensorImage:
    """Channel-major float image at a known normalization stage."""

    values: np.ndarray
    stage: str
    source: str | None = None
    crop: int | None = None

    def __post_init__(self):
        v = np.asarray(self.values, dtype=np.float64)
        if v.ndim != 3 or v.shape[0] != 3:
            raise InvalidInputError(
                f"expected a 3xHxW tensor, got shape {v.shape}"
            )
        if not np.isfinite(v).all():
            raise InvalidInputError("tensor contains non-finite values")
        if self.stage not in (STAGE_MINMAX, STAGE_STANDARDIZED):
            raise InvalidInputError(f"unknown stage '{self.stage}'")
        if self.stage == STAGE_MINMAX:
            if v.min() < -1e-9 or v.max() > 1 + 1e-9:
                raise InvalidInputError("minmax-stage values must lie in [0, 1]")
        object.__setattr__(self, "values", v)

    @property
    def height(self) -> int:
        return self.values.shape[1]

    @property
    def width(self) -> int:
        return self.values.shape[2]


@dataclass(frozen=True)
class ChannelStats:
    """Per-channel mean and standard deviation used for standardization."""

    mean: tuple[float, float, float]
    std: tuple[float, float, float]

    def __post_init__(self):
        if len(self.mean) != 3 or len(self.std) != 3:
            raise ConfigError("channel stats need exactly 3 mean and 3 std values")
        if any(not np.isfinite(m) for m in self.mean):
            raise ConfigError("channel means must be finite")
        if any(s <= 0 or not np.isfinite(s) for s in self.std):
            raise ConfigError("channel std values must be strictly positive")
        object.__setattr__(self, "mean", tuple(float(m) for m in self.mean))
        object.__setattr__(self, "std", tuple(float(s) for s in self.std))


# Conventional statistics of the natural-image corpus the exported models
# were pretrained on. Manifests may override these per model.
DEFAULT_CHANNEL_STATS = ChannelStats(
    mean=(0.485, 0.456, 0.406), std=(0.229, 0.224, 0.225)
)


@dataclass(frozen=True)
class CropTag:
    """Where a crop came from: window corner and mirror state.

    ``top``/``left`` are window coordinates in the frame of the (possibly
    flipped) source image.
    """

    corner: str
    flipped: bool
    top: int
    left: int


@dataclass(frozen=True)
class CropSet:
    """Ordered crops with provenance. Ten-crop extraction yields 10 entries;
    the crop-free inference path yields a single center crop."""

    crops: tuple[TensorImage, ...] = field(default_factory=tuple)
    provenance: tuple[CropTag, ...] = field(default_factory=tuple)

    def __post_init__(self):
        if len(self.crops) < 1:
            raise InvalidInputError("a crop set needs at least one crop")
        if len(self.crops) != len(self.provenance):
            raise InvalidInputError("crops and provenance must align")
        object.__setattr__(self, "crops", tuple(self.crops))
        object.__setattr__(self, "provenance", tuple(self.provenance))

    def __len__(self) -> int:
        return len(self.crops)


def load_image(path: str | Path) -> RawImage:
    """Decode a PNG or JPEG file into an 8-bit RGB image.

    Images deeper than 8 bits per sample are rejected; palette, grayscale
    and alpha variants are converted to RGB.
    """
    path = Path(path)
    try:
        with Image.open(path) as im:
            if im.mode in _DEEP_MODES:
                raise InvalidInputError(
                    f"{path.name}: {im.mode}-mode images (more than 8 bits per "
                    "sample) are not supported"
                )
            rgb = im.convert("RGB")
            pixels = np.asarray(rgb, dtype=np.uint8)
    except InvalidInputError:
        raise
    except (OSError, ValueError) as exc:
        raise InvalidInputError(f"cannot decode image '{path}': {exc}") from exc
    return RawImage(pixels=pixels, source=path.name)


def resize_bilinear(img: RawImage, out_h: int, out_w: int) -> RawImage:
    """Resize with bilinear interpolation (half-pixel-center convention).

    Output values are convex combinations of input values and therefore
    stay within the input's [min, max] range.
    """
    if out_h < 1 or out_w < 1:
        raise InvalidInputError(f"invalid output size {out_h}x{out_w}")
    pixels = img.pixels.astype(np.float64, copy=False)
    in_h, in_w = pixels.shape[:2]

    ys = np.clip((np.arange(out_h) + 0.5) * (in_h / out_h) - 0.5, 0, in_h - 1)
    xs = np.clip((np.arange(out_w) + 0.5) * (in_w / out_w) - 0.5, 0, in_w - 1)
    y0 = np.floor(ys).astype(np.intp)
    x0 = np.floor(xs).astype(np.intp)
    y1 = np.minimum(y0 + 1, in_h - 1)
    x1 = np.minimum(x0 + 1, in_w - 1)
    wy = (ys - y0)[:, None, None]
    wx = (xs - x0)[None, :, None]

    top = (1 - wx) * pixels[y0][:, x0] + wx * pixels[y0][:, x1]
    bottom = (1 - wx) * pixels[y1][:, x0] + wx * pixels[y1][:, x1]
    out = (1 - wy) * top + wy * bottom
    # Guard against float round-off nudging values past the input range.
    out = np.clip(out, pixels.min(), pixels.max())
    return RawImage(pixels=out, source=img.source)


def minmax_normalize(img: RawImage) -> TensorImage:
    """Scale intensities to [0, 1] using the global min and max.

    A constant image carries no intensity information, so the division
    guard maps it to all zeros instead of failing.
    """
    pixels = img.pixels.astype(np.float64, copy=False)
    lo = pixels.min()
    hi = pixels.max()
    if hi > lo:
        values = (pixels - lo) / (hi - lo)
    else:
        values = np.zeros_like(pixels)
    chw = np.ascontiguousarray(values.transpose(2, 0, 1))
    return TensorImage(values=chw, stage=STAGE_MINMAX, source=img.source)


def standardize(img: TensorImage, stats: ChannelStats) -> TensorImage:
    """Shift and scale each channel to the given mean and std."""
    if img.stage != STAGE_MINMAX:
        raise InvalidInputError(
            f"standardize expects a minmax-stage tensor, got '{img.stage}'"
        )
    mean = np.asarray(stats.mean, dtype=np.float64)[:, None, None]
    std = np.asarray(stats.std, dtype=np.float64)[:, None, None]
    values = (img.values - mean) / std
    return TensorImage(
        values=values,
        stage=STAGE_STANDARDIZED,
        source=img.source,
        crop=img.crop,
    )


def _crop_windows(h: int, w: int, crop_h: int, crop_w: int) -> list[tuple[str, int, int]]:
    """Corner and center window origins, in the fixed TL/TR/BL/BR/center order."""
    return [
        ("tl", 0, 0),
        ("tr", 0, w - crop_w),
        ("bl", h - crop_h, 0),
        ("br", h - crop_h, w - crop_w),
        ("center", (h - crop_h) // 2, (w - crop_w) // 2),
    ]


def ten_crop(img: RawImage, crop_h: int = CROP_SIZE, crop_w: int = CROP_SIZE) -> CropSet:
    """Extract the ten test-time crops of an image.

    Five windows (four corners + center) of the image, then the same five
    of its horizontal mirror, each min-max normalized independently. The
    ordering is part of the external contract: votes over crops must be
    reproducible byte for byte.
    """
    h, w = img.height, img.width
    if h < crop_h or w < crop_w:
        raise InvalidInputError(
            f"image {h}x{w} is smaller than the crop size {crop_h}x{crop_w}"
        )
    crops: list[TensorImage] = []
    tags: list[CropTag] = []
    flipped_pixels = img.pixels[:, ::-1]
    for flipped, pixels in ((False, img.pixels), (True, flipped_pixels)):
        for corner, top, left in _crop_windows(h, w, crop_h, crop_w):
            window = pixels[top : top + crop_h, left : left + crop_w]
            raw = RawImage(pixels=np.ascontiguousarray(window), source=img.source)
            tensor = replace(minmax_normalize(raw), crop=len(crops))
            crops.append(tensor)
            tags.append(CropTag(corner=corner, flipped=flipped, top=top, left=left))
    return CropSet(crops=tuple(crops), provenance=tuple(tags))


def center_crop_set(img: RawImage, crop_h: int = CROP_SIZE, crop_w: int = CROP_SIZE) -> CropSet:
    """Single-center-crop variant used when test-time augmentation is off."""
    h, w = img.height, img.width
    if h < crop_h or w < crop_w:
        raise InvalidInputError(
            f"image {h}x{w} is smaller than the crop size {crop_h}x{crop_w}"
        )
    top = (h - crop_h) // 2
    left = (w - crop_w) // 2
    window = img.pixels[top : top + crop_h, left : left + crop_w]
    raw = RawImage(pixels=np.ascontiguousarray(window), source=img.source)
    tensor = replace(minmax_normalize(raw), crop=0)
    tag = CropTag(corner="center", flipped=False, top=top, left=left)
    return CropSet(crops=(tensor,), provenance=(tag,))


def preprocess_image(
    img: RawImage,
    stats: ChannelStats = DEFAULT_CHANNEL_STATS,
    out_h: int = CROP_SIZE,
    out_w: int = CROP_SIZE,
) -> TensorImage:
    """Full crop-free preparation: resize, min-max scale, standardize."""
    return standardize(minmax_normalize(resize_bilinear(img, out_h, out_w)), stats)
