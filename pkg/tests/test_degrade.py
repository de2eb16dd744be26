import numpy as np
import pytest
from PIL import Image

from octuplet.degrade import (EVAL_RESOLUTIONS, IMAGE_SIZE, KERNEL_DESCRIPTION, FaceImage,
                              ResolutionSampler, as_image_array, degrade_batch, degrade_image,
                              degrade_pixels, mean_abs_laplacian)
from octuplet.errors import DomainError, ShapeError
from octuplet.synthetic import make_dataset


@pytest.fixture(scope="module")
def corpus():
    pool, store = make_dataset(10, 2, seed=7)
    return [store[r] for r in sorted(store)]


def test_shape_dtype_range(corpus):
    for r in (2, 7, 14, 28, 56, 111):
        out = degrade_pixels(corpus[0], r)
        assert out.shape == (IMAGE_SIZE, IMAGE_SIZE, 3) and out.dtype == np.float32
        assert out.min() >= 0.0 and out.max() <= 1.0


def test_full_resolution_is_identity(corpus):
    for img in corpus:
        out = degrade_pixels(img, 112)
        assert np.array_equal(out, img)
        assert out is not img


def test_determinism(corpus):
    for r in (7, 14, 28, 56):
        assert np.array_equal(degrade_pixels(corpus[3], r), degrade_pixels(corpus[3], r))


def test_errors():
    img = np.zeros((112, 112, 3), np.float32)
    for r in (0, 1, 113, -5):
        with pytest.raises(DomainError):
            degrade_pixels(img, r)
    with pytest.raises(ShapeError):
        degrade_pixels(np.zeros((64, 64, 3)), 7)
    with pytest.raises(DomainError):
        degrade_batch([], ResolutionSampler())


def test_uint8_input_is_scaled():
    img = np.full((112, 112, 3), 255, np.uint8)
    assert np.allclose(as_image_array(img), 1.0)
    assert np.allclose(degrade_pixels(img, 14), 1.0, atol=1e-6)


def test_constant_image_is_preserved():
    img = np.full((112, 112, 3), 0.37, np.float32)
    for r in (7, 28):
        np.testing.assert_allclose(degrade_pixels(img, r), 0.37, atol=1e-6)


def test_matches_pillow_reference(corpus):
    # same kernel applied through Pillow directly, one channel at a time
    img = corpus[5]
    for r in (7, 28):
        ref = np.empty_like(img)
        for c in range(3):
            ch = Image.fromarray(np.ascontiguousarray(img[:, :, c]))
            small = ch.resize((r, r), Image.BICUBIC)
            ref[:, :, c] = np.asarray(small.resize((112, 112), Image.BICUBIC))
        np.testing.assert_array_equal(degrade_pixels(img, r), np.clip(ref, 0, 1))
    assert "BICUBIC" in KERNEL_DESCRIPTION


def test_frequency_attenuation(corpus):
    # high-frequency energy falls monotonically with resolution, on average
    energy = {r: np.mean([mean_abs_laplacian(degrade_pixels(x, r)) for x in corpus])
              for r in EVAL_RESOLUTIONS}
    values = [energy[r] for r in EVAL_RESOLUTIONS]
    assert values == sorted(values)
    assert energy[7] < 0.25 * energy[112]


def test_aliasing_is_suppressed():
    # a grating above the r=14 Nyquist rate must not survive as a strong alias
    x = np.arange(112)
    stripes = (0.5 + 0.5 * np.sin(2 * np.pi * 0.4 * x))[None, :, None] * np.ones((112, 1, 3))
    out = degrade_pixels(stripes.astype(np.float32), 14)
    assert out.std() < 0.1 * stripes.std()


def test_face_image_wrapper(corpus):
    f = degrade_image(FaceImage(corpus[0]), 14)
    assert f.resolution == 14 and f.pixels.shape == (112, 112, 3)


def test_sampler_determinism_and_range():
    a = ResolutionSampler((7, 14, 28), seed=5)
    b = ResolutionSampler((28, 14, 7), seed=5)
    draws_a = [a.draw(16) for _ in range(4)]
    assert draws_a == [b.draw(16) for _ in range(4)]
    flat = [r for d in draws_a for r in d]
    assert set(flat) <= {7, 14, 28} and len(set(flat)) == 3
    # draw i of call k does not depend on how many were drawn
    c = ResolutionSampler((7, 14, 28), seed=5)
    assert c.resolution_for(1, 3) == draws_a[1][3]
    assert ResolutionSampler((7, 14, 28), seed=6).draw(64) != ResolutionSampler((7, 14, 28), seed=5).draw(64)
    with pytest.raises(DomainError):
        ResolutionSampler((1, 7))


def test_sampler_is_roughly_uniform():
    s = ResolutionSampler((7, 14, 28), seed=0)
    draws = np.array([r for _ in range(300) for r in s.draw(10)])
    for r in (7, 14, 28):
        assert abs(np.mean(draws == r) - 1 / 3) < 0.03


def test_degrade_batch_alignment(corpus):
    s = ResolutionSampler((7, 14), seed=1)
    out = degrade_batch(corpus[:4], s)
    res = ResolutionSampler((7, 14), seed=1).draw(4)
    for img, o, r in zip(corpus[:4], out, res):
        assert o.resolution == r
        assert np.array_equal(o.pixels, degrade_pixels(img, r))
