import io
import random

import cv2
import numpy as np
import pytest
from helpers import make_image, write_png
from PIL import Image

from ttsp.core import BoundingBox, ToolInvocation
from ttsp.errors import BadImageIndex, DegenerateBox, MissingImage, TinyRegion
from ttsp.vistool import (
    ImageAsset,
    bilinear_resize,
    crop_and_magnify,
    load_image,
    parse_invocation,
    pixel_box,
    target_size,
    zoom_in,
)


def gradient(w, h):
    x = np.linspace(0, 255, w)[None, :].repeat(h, 0)
    y = np.linspace(0, 255, h)[:, None].repeat(w, 1)
    return ImageAsset(np.stack([x, y, (x + y) / 2], axis=2).round().astype(np.uint8))


@pytest.mark.parametrize("src,dst", [((17, 9), (40, 23)), ((64, 48), (1024, 768)), ((8, 8), (1024, 1024)),
                                     ((30, 11), (31, 12))])
def test_resize_matches_opencv(src, dst):
    rng = np.random.default_rng(0)
    px = rng.integers(0, 256, size=(src[1], src[0], 3), dtype=np.uint8)
    ours = bilinear_resize(px, *dst)
    ref = cv2.resize(px, dst, interpolation=cv2.INTER_LINEAR)
    # OpenCV uses fixed-point weights; allow one intensity level
    assert np.abs(ours.astype(int) - ref.astype(int)).max() <= 1


def test_identity_crop_is_pixel_identical():
    img = make_image(512, 512, seed=3)
    out = zoom_in([img], ToolInvocation(BoundingBox(0, 0, 1, 1), "all", 0))
    assert out.pixels.shape == (512, 512, 3)
    assert np.array_equal(out.pixels, img.pixels)


def test_mid_crop_dimensions():
    img = gradient(1024, 768)
    out = zoom_in([img], ToolInvocation(BoundingBox(0.25, 0.25, 0.75, 0.75), "mid", 0))
    assert pixel_box(img, BoundingBox(0.25, 0.25, 0.75, 0.75)) == (256, 192, 768, 576)
    assert (out.width, out.height) == (1024, 768)
    ref = cv2.resize(np.ascontiguousarray(img.pixels[192:576, 256:768]), (1024, 768), interpolation=cv2.INTER_LINEAR)
    assert np.abs(out.pixels.astype(int) - ref.astype(int)).max() <= 1


def test_constant_colour_survives():
    img = ImageAsset(np.full((300, 400, 3), (12, 200, 77), dtype=np.uint8))
    rng = random.Random(4)
    for _ in range(50):
        x1, y1 = rng.uniform(0, 0.9), rng.uniform(0, 0.9)
        box = BoundingBox(x1, y1, rng.uniform(x1 + 0.001, 1), rng.uniform(y1 + 0.001, 1))
        out = crop_and_magnify(img, box)
        assert (out.pixels == (12, 200, 77)).all()


def test_target_size_never_downscales():
    assert target_size(2000, 1000, 1024) == (2000, 1000)
    assert target_size(100, 50, 1024) == (1024, 512)
    assert target_size(50, 100, 1024) == (512, 1024)


def test_limit_follows_small_originals():
    img = make_image(64, 48)
    out = zoom_in([img], ToolInvocation(BoundingBox(0, 0, 0.5, 0.5), "q", 0))
    assert (out.width, out.height) == (64, 48)


def test_min_crop_expansion():
    img = make_image(100, 100)
    assert pixel_box(img, BoundingBox(0.5, 0.5, 0.51, 0.51)) == (47, 47, 55, 55)
    assert pixel_box(img, BoundingBox(0.99, 0.0, 1.0, 0.01)) == (92, 0, 100, 8)
    with pytest.raises(TinyRegion):
        zoom_in([make_image(5, 5)], ToolInvocation(BoundingBox(0, 0, 0.5, 0.5), "q", 0))


def test_crops_chain_provenance():
    img = make_image(200, 100)
    first = zoom_in([img], ToolInvocation(BoundingBox(0, 0, 0.5, 0.5), "a", 0))
    second = zoom_in([img, first], ToolInvocation(BoundingBox(0.5, 0.5, 1, 1), "b", 1))
    assert second.root() is img
    assert [i for i, _ in second.provenance()] == [0, 1]
    with pytest.raises(BadImageIndex):
        zoom_in([img], ToolInvocation(BoundingBox(0, 0, 1, 1), "c", 3))


def test_deterministic_png():
    img = make_image(80, 60, seed=9)
    out = zoom_in([img], ToolInvocation(BoundingBox(0.1, 0.2, 0.6, 0.7), "z", 0))
    again = zoom_in([img], ToolInvocation(BoundingBox(0.1, 0.2, 0.6, 0.7), "z", 0))
    assert out.to_png() == again.to_png()
    decoded = np.asarray(Image.open(io.BytesIO(out.to_png())))
    assert np.array_equal(decoded, out.pixels)
    assert out.data_url().startswith("data:image/png;base64,")


def test_parse_invocation():
    inv = parse_invocation({"bbox_2d": [0.1, 0.1, 0.5, 0.5], "label": "x", "image_index": 1.0})
    assert inv.image_index == 1
    for bad in [{"bbox_2d": [0.1, 0.1]}, {"bbox_2d": [0.1, 0.1, 0.5, 0.5], "image_index": -1},
                {"bbox_2d": [True, 0, 1, 1]}, "nope"]:
        with pytest.raises(ValueError):
            parse_invocation(bad)
    with pytest.raises(DegenerateBox):
        parse_invocation({"bbox_2d": [0.3, 0.3, 0.3, 0.6]})


def test_load_image(tmp_path):
    img = load_image(write_png(tmp_path / "a.png"))
    assert (img.width, img.height) == (64, 48)
    (tmp_path / "b.gif").write_bytes(b"GIF89a")
    with pytest.raises(MissingImage):
        load_image(tmp_path / "b.gif")
    with pytest.raises(MissingImage):
        load_image(tmp_path / "missing.png")
    Image.fromarray(make_image().pixels).save(tmp_path / "c.bmp")
    with pytest.raises(MissingImage):
        load_image(tmp_path / "c.bmp")
