import pytest
import torch
from pydantic import ValidationError

from src.domain.errors import ImageFormatError
from src.domain.imagedata import (
    DatasetSpec,
    Image,
    center_crop,
    generate_synthetic,
    load_directory,
    load_image,
    save_image,
)
from src.domain.runners.common import load_dataset, write_dataset
from src.infrastructure.imageio import decode_ppm, encode_ppm, quantize
from src.run_config import RunConfig


def test_ppm_round_trip_within_one_level(tmp_path):
    for i in range(10):
        h, w = 5 + i, 17 - i
        img = Image(torch.rand(h, w, 3))
        path = tmp_path / f"img{i}.ppm"
        save_image(img, path)
        back = load_image(path)

        assert back.pixels.shape == (h, w, 3)
        assert float((back.pixels - img.pixels).abs().max()) <= 1 / 255 + 1e-7


def test_quantize_rounds_half_up():
    px = torch.tensor([[[0.0, 0.5 / 255, 1.0]]])
    assert quantize(px).tolist() == [[[0, 1, 255]]]


def test_decode_ppm_skips_comments_and_scales_maxval():
    data = b"P6\n# a comment\n2 1\n# another\n15\n" + bytes([15, 0, 15, 0, 15, 0])
    px = decode_ppm(data)

    assert px.shape == (1, 2, 3)
    assert torch.equal(px[0, 0], torch.tensor([1.0, 0.0, 1.0]))


@pytest.mark.parametrize("data", [
    b"P3\n1 1\n255\n\x00\x00\x00",  # ascii variant
    b"P6\n0 4\n255\n",  # zero dimension
    b"P6\n2 2\n255\n\x00\x00",  # truncated raster
    b"P6\n2",  # truncated header
])
def test_decode_ppm_rejects_malformed(data):
    with pytest.raises(ImageFormatError):
        decode_ppm(data)


def test_encode_ppm_header():
    payload = encode_ppm(torch.zeros(2, 3, 3))
    assert payload.startswith(b"P6\n3 2\n255\n")
    assert len(payload) == len(b"P6\n3 2\n255\n") + 2 * 3 * 3


def test_unknown_suffix_is_rejected(tmp_path):
    with pytest.raises(ImageFormatError):
        save_image(Image(torch.zeros(2, 2, 3)), tmp_path / "x.bmp")


def test_image_validation():
    with pytest.raises(ImageFormatError):
        Image(torch.full((2, 2, 3), 1.5))
    with pytest.raises(ImageFormatError):
        Image(torch.zeros(2, 2))
    clamped = Image.from_tensor(torch.full((2, 2, 3), 1.5), clamp=True)
    assert float(clamped.pixels.max()) == 1.0


def test_synthetic_dataset_is_deterministic():
    spec = DatasetSpec(count=4, seed=5, size_range=(32, 48), aspect_range=(0.5, 2.0), class_count=3)
    a = generate_synthetic(spec)
    b = generate_synthetic(spec)

    assert [label for _, label in a] == [label for _, label in b]
    for (ia, _), (ib, _) in zip(a, b):
        assert torch.equal(ia.pixels, ib.pixels)
        assert 0.0 <= float(ia.pixels.min()) and float(ia.pixels.max()) <= 1.0
        assert max(ia.height, ia.width) <= 48


def test_dataset_spec_bounds():
    with pytest.raises(ValidationError):
        DatasetSpec(size_range=(16, 64))
    with pytest.raises(ValidationError):
        DatasetSpec(aspect_range=(0.1, 1.0))


def test_center_crop_square():
    img = Image(torch.rand(40, 60, 3))
    out = center_crop(img, 32)
    assert (out.height, out.width) == (32, 32)


def test_load_directory_sorted(tmp_path):
    for name in ("b.ppm", "a.ppm"):
        save_image(Image(torch.full((3, 3, 3), 1.0 if name == "a.ppm" else 0.0)), tmp_path / name)
    (tmp_path / "notes.txt").write_text("ignored")

    loaded = load_directory(tmp_path)

    assert [p.name for p, _ in loaded] == ["a.ppm", "b.ppm"]
    assert float(loaded[0][1].pixels.mean()) == 1.0


def test_dataset_directory_keeps_labels(tmp_path):
    samples = generate_synthetic(DatasetSpec(count=3, seed=1, size_range=(16, 16), aspect_range=(1, 1), class_count=3))
    write_dataset(samples, tmp_path)

    loaded = load_dataset(RunConfig.load(overrides={"data": {"dir": str(tmp_path)}}))

    assert [label for _, label in loaded] == [label for _, label in samples]
    assert [img.pixels.shape for img, _ in loaded] == [img.pixels.shape for img, _ in samples]


def test_load_directory_empty(tmp_path):
    with pytest.raises(ImageFormatError):
        load_directory(tmp_path)
