"""The zoom-in tool: crop a normalized box and magnify it.

Boxes arrive in normalized [0, 1] coordinates; this module is the only place
they are converted to pixels. Resizing is a plain numpy bilinear resampler
(half-pixel centers) so the output is identical on every platform.
"""

from __future__ import annotations

import base64
import io
import math
from dataclasses import dataclass, field
from pathlib import Path
from typing import Sequence

import numpy as np
from PIL import Image

from .core import BoundingBox, ToolInvocation, validate_bbox
from .errors import BadImageIndex, MissingImage, TinyRegion

MAX_SIDE = 1024
MIN_CROP = 8


@dataclass(frozen=True, eq=False)
class ImageAsset:
    """An RGB image plus where it came from.

    ``parent`` and ``bbox`` are set for crops; following ``parent`` always
    ends at an original image.
    """

    pixels: np.ndarray = field(repr=False)
    parent: "ImageAsset | None" = None
    bbox: BoundingBox | None = None
    parent_index: int | None = None
    tag: str = "original"

    def __post_init__(self):
        arr = np.asarray(self.pixels)
        if arr.ndim != 3 or arr.shape[2] != 3 or arr.dtype != np.uint8:
            raise ValueError(f"expected HxWx3 uint8 pixels, got {arr.shape} {arr.dtype}")
        if arr.shape[0] < 1 or arr.shape[1] < 1:
            raise ValueError("image must be at least 1x1")
        if (self.parent is None) != (self.bbox is None):
            raise ValueError("crop provenance needs both parent and bbox")
        arr = arr.copy() if arr.flags.writeable else arr
        arr.setflags(write=False)
        object.__setattr__(self, "pixels", arr)

    @property
    def height(self) -> int:
        return int(self.pixels.shape[0])

    @property
    def width(self) -> int:
        return int(self.pixels.shape[1])

    @property
    def is_original(self) -> bool:
        return self.parent is None

    def root(self) -> "ImageAsset":
        node = self
        while node.parent is not None:
            node = node.parent
        return node

    def provenance(self) -> list[tuple[int | None, BoundingBox]]:
        """(parent image index, box) pairs from the original down to this crop."""
        chain = []
        node = self
        while node.parent is not None:
            chain.append((node.parent_index, node.bbox))
            node = node.parent
        return chain[::-1]

    def to_png(self) -> bytes:
        # pixels are read-only, so the encoding can be cached
        cached = self.__dict__.get("_png")
        if cached is None:
            buf = io.BytesIO()
            Image.fromarray(self.pixels, "RGB").save(buf, format="PNG", optimize=False)
            cached = buf.getvalue()
            object.__setattr__(self, "_png", cached)
        return cached

    def data_url(self) -> str:
        return "data:image/png;base64," + base64.b64encode(self.to_png()).decode("ascii")


def load_image(path: str | Path) -> ImageAsset:
    path = Path(path)
    try:
        with Image.open(path) as im:
            if im.format not in {"PNG", "JPEG", "MPO"}:
                raise MissingImage(path)
            arr = np.asarray(im.convert("RGB"))
    except (OSError, ValueError) as exc:
        raise MissingImage(path) from exc
    return ImageAsset(arr, tag=f"original:{path.name}")


def bilinear_resize(pixels: np.ndarray, out_w: int, out_h: int) -> np.ndarray:
    """Resize an HxWxC uint8 array with bilinear interpolation.

    Uses half-pixel sample centers with edge clamping, the same convention as
    OpenCV's INTER_LINEAR, computed in float64 and rounded to nearest.
    """
    in_h, in_w = pixels.shape[:2]
    if (in_w, in_h) == (out_w, out_h):
        return pixels.copy()

    def axis(n_in, n_out):
        src = (np.arange(n_out, dtype=np.float64) + 0.5) * (n_in / n_out) - 0.5
        src = np.clip(src, 0.0, n_in - 1)
        lo = np.floor(src).astype(np.intp)
        hi = np.minimum(lo + 1, n_in - 1)
        return lo, hi, src - lo

    y0, y1, wy = axis(in_h, out_h)
    x0, x1, wx = axis(in_w, out_w)
    # separable: blend rows at input width first, then columns
    img = pixels.astype(np.float64)
    rows = img[y0] * (1 - wy)[:, None, None] + img[y1] * wy[:, None, None]
    out = rows[:, x0] * (1 - wx)[None, :, None] + rows[:, x1] * wx[None, :, None]
    return np.clip(np.rint(out), 0, 255).astype(np.uint8)


def _round_half_up(v: float) -> int:
    return int(math.floor(v + 0.5))


def _pixel_span(lo: float, hi: float, size: int, min_size: int) -> tuple[int, int]:
    a = min(max(_round_half_up(lo * size), 0), size)
    b = min(max(_round_half_up(hi * size), 0), size)
    if b - a >= min_size:
        return a, b
    if size < min_size:
        raise TinyRegion(f"image side {size}px is smaller than the {min_size}px minimum crop")
    center = (a + b) / 2.0
    a = _round_half_up(center - min_size / 2.0)
    a = min(max(a, 0), size - min_size)
    return a, a + min_size


def pixel_box(image: ImageAsset, bbox: BoundingBox, min_crop: int = MIN_CROP) -> tuple[int, int, int, int]:
    """Pixel (left, top, right, bottom) for ``bbox``, expanded to ``min_crop``."""
    left, right = _pixel_span(bbox.x1, bbox.x2, image.width, min_crop)
    top, bottom = _pixel_span(bbox.y1, bbox.y2, image.height, min_crop)
    return left, top, right, bottom


def target_size(crop_w: int, crop_h: int, limit: int) -> tuple[int, int]:
    """Output size whose longer side is ``limit``; never smaller than the crop."""
    longer = max(crop_w, crop_h)
    if longer >= limit:
        return crop_w, crop_h
    scale = limit / longer
    if crop_w >= crop_h:
        return limit, max(1, _round_half_up(crop_h * scale))
    return max(1, _round_half_up(crop_w * scale)), limit


def crop_and_magnify(
    image: ImageAsset,
    bbox: BoundingBox,
    *,
    parent_index: int | None = None,
    max_side: int = MAX_SIDE,
    min_crop: int = MIN_CROP,
) -> ImageAsset:
    left, top, right, bottom = pixel_box(image, bbox, min_crop)
    crop = image.pixels[top:bottom, left:right]
    root = image.root()
    limit = min(max_side, max(root.width, root.height))
    out_w, out_h = target_size(right - left, bottom - top, limit)
    pixels = bilinear_resize(crop, out_w, out_h)
    return ImageAsset(pixels, parent=image, bbox=bbox, parent_index=parent_index, tag=f"crop({parent_index},{bbox})")


def zoom_in(
    images: Sequence[ImageAsset] | ImageAsset,
    invocation: ToolInvocation,
    *,
    max_side: int = MAX_SIDE,
    min_crop: int = MIN_CROP,
) -> ImageAsset:
    """Execute one zoom-in call against the images of a trace.

    ``images[0]`` is the original, ``images[k]`` the k-th crop returned so far.

    Raises:
        BadImageIndex: ``invocation.image_index`` is not an existing image.
        TinyRegion: the target image is smaller than ``min_crop`` pixels.
    """
    if isinstance(images, ImageAsset):
        images = [images]
    idx = invocation.image_index
    if not 0 <= idx < len(images):
        raise BadImageIndex(f"image_index {idx} out of range (trace has {len(images)} images)")
    return crop_and_magnify(images[idx], invocation.bbox, parent_index=idx, max_side=max_side, min_crop=min_crop)


def parse_invocation(args: dict) -> ToolInvocation:
    """Build a validated invocation from raw tool-call arguments.

    Raises ``ValueError`` (``DegenerateBox`` for bad boxes) on malformed input.
    """
    if not isinstance(args, dict):
        raise ValueError("tool arguments must be an object")
    bbox = args.get("bbox_2d")
    if not isinstance(bbox, (list, tuple)) or len(bbox) != 4:
        raise ValueError(f"bbox_2d must be a list of four numbers, got {bbox!r}")
    if any(isinstance(v, bool) for v in bbox):
        raise ValueError("bbox_2d must be numeric")
    label = args.get("label", "")
    if not isinstance(label, str):
        raise ValueError("label must be a string")
    index = args.get("image_index", 0)
    if isinstance(index, float) and index.is_integer():
        index = int(index)
    if not isinstance(index, int) or isinstance(index, bool) or index < 0:
        raise ValueError(f"image_index must be a non-negative integer, got {index!r}")
    return ToolInvocation(validate_bbox(*bbox), label, index)
