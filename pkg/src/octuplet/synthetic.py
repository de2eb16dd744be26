"""Procedural face-style images for desk-scale experiments.

Each identity is a fixed set of facial attributes: skin, hair, iris and lip
colours, head and hair shape, and feature geometry. Every image of an identity
re-renders those attributes under a random pose shift, scale, illumination,
colour cast, background, expression and sensor noise, and overlays a fine
texture of two random oriented gratings with a period of two to three and a
half pixels.

The texture carries no identity but is present in every full-resolution image
and absent after heavy down-sampling. A model trained only on full-resolution
images therefore sees low-resolution inputs as out of distribution, which is
the gap cross-resolution fine-tuning has to close.
"""
from dataclasses import dataclass

import numpy as np
from scipy.special import expit

from .batching import IdentityPool
from .degrade import IMAGE_SIZE
from .images import MemoryImageStore, save_png

TEXTURE_AMPLITUDE = 0.3

_YY, _XX = np.mgrid[0:IMAGE_SIZE, 0:IMAGE_SIZE].astype(np.float64)


@dataclass
class Identity:
    skin: np.ndarray
    hair: np.ndarray
    iris: np.ndarray
    lips: np.ndarray
    head_rx: float
    head_ry: float
    hairline: float
    hair_volume: float
    eye_dx: float
    eye_y: float
    eye_r: float
    nose_len: float
    mouth_y: float
    mouth_w: float


_HAIR_PALETTE = np.array([
    [0.08, 0.06, 0.05], [0.25, 0.16, 0.09], [0.45, 0.30, 0.16],
    [0.80, 0.66, 0.40], [0.55, 0.22, 0.10], [0.62, 0.60, 0.58],
])


def random_identity(rng):
    skin = np.array([0.72, 0.55, 0.45]) * rng.uniform(0.8, 1.05) + rng.normal(0, 0.02, 3)
    hair = _HAIR_PALETTE[rng.integers(len(_HAIR_PALETTE))] + rng.normal(0, 0.04, 3)
    return Identity(
        skin=np.clip(skin, 0.1, 0.95),
        hair=np.clip(hair, 0.02, 0.95),
        iris=rng.uniform(0.0, 1.0, 3),
        lips=rng.uniform(0.0, 1.0, 3),
        head_rx=rng.uniform(30, 38),
        head_ry=rng.uniform(40, 48),
        hairline=rng.uniform(0.25, 0.7),
        hair_volume=rng.uniform(1.0, 1.2),
        eye_dx=rng.uniform(12, 18),
        eye_y=rng.uniform(-10, -3),
        eye_r=rng.uniform(4.5, 6.5),
        nose_len=rng.uniform(8, 15),
        mouth_y=rng.uniform(18, 26),
        mouth_w=rng.uniform(8, 14),
    )


def _soft(v, width=1.0):
    return expit(v / width)


def _ellipse(cx, cy, rx, ry, x, y):
    return 1.0 - np.sqrt(((x - cx) / rx) ** 2 + ((y - cy) / ry) ** 2)


def render(ident, rng):
    """One 112 x 112 x 3 float32 image of ``ident`` under random nuisances."""
    scale = rng.uniform(0.93, 1.07)
    cx = IMAGE_SIZE / 2 + rng.uniform(-4, 4)
    cy = IMAGE_SIZE / 2 + 4 + rng.uniform(-4, 4)
    x = (_XX - cx) / scale
    y = (_YY - cy) / scale

    bg_a, bg_b = rng.uniform(0.0, 1.0, 3), rng.uniform(0.0, 1.0, 3)
    t = (_YY / IMAGE_SIZE)[..., None]
    img = bg_a * (1 - t) + bg_b * t

    head = _soft(_ellipse(0, 0, ident.head_rx, ident.head_ry, x, y) * ident.head_rx, 1.0)
    hair = _soft(_ellipse(0, -6, ident.head_rx * ident.hair_volume,
                          ident.head_ry * ident.hair_volume, x, y) * ident.head_rx, 1.0)
    hairline = -ident.head_ry + ident.hairline * ident.head_ry * 0.9
    hair = hair * _soft(hairline - y - 0.15 * np.abs(x), 1.5)
    neck = _soft(12 - np.abs(x), 1.0) * _soft(y - ident.head_ry * 0.6, 1.0)

    face = ident.skin[None, None, :]
    # soft top-left key light
    shade = 1.0 + 0.12 * (-(x / ident.head_rx) - 0.5 * (y / ident.head_ry))
    face = face * shade[..., None]

    cover = np.maximum(head, neck)[..., None]
    img = img * (1 - cover) + face * cover
    img = img * (1 - hair[..., None]) + ident.hair[None, None, :] * hair[..., None]

    blink = rng.uniform(0.6, 1.0)
    for side in (-1, 1):
        ex = side * ident.eye_dx
        white = _soft(_ellipse(ex, ident.eye_y, ident.eye_r * 1.6, ident.eye_r * blink, x, y)
                      * ident.eye_r, 0.7)[..., None]
        iris = _soft(_ellipse(ex, ident.eye_y, ident.eye_r * 0.8, ident.eye_r * 0.8 * blink, x, y)
                     * ident.eye_r, 0.5)[..., None]
        img = img * (1 - white) + 0.92 * white
        img = img * (1 - iris) + ident.iris[None, None, :] * iris
        brow = _soft(_ellipse(ex, ident.eye_y - ident.eye_r - 4, ident.eye_r * 2.0, 1.6, x, y)
                     * 2.0, 0.5)[..., None]
        img = img * (1 - brow) + ident.hair[None, None, :] * 0.8 * brow

    nose = _soft(_ellipse(0, ident.eye_y + ident.nose_len, 3.5, 2.5, x, y) * 3.0, 0.6)[..., None]
    img = img * (1 - 0.35 * nose)
    smile = rng.uniform(-2, 3)
    mouth_open = rng.uniform(1.2, 3.5)
    mouth = _soft(_ellipse(0, ident.mouth_y + smile * (x / ident.mouth_w) ** 2, ident.mouth_w,
                           mouth_open, x, y) * 3.0, 0.6)[..., None]
    img = img * (1 - mouth) + ident.lips[None, None, :] * mouth

    tex = np.zeros_like(x)
    for f, th, ph in zip(rng.uniform(0.3, 0.45, 2), rng.uniform(0, np.pi, 2),
                         rng.uniform(0, 2 * np.pi, 2)):
        tex += np.sin(2 * np.pi * f * (_XX * np.cos(th) + _YY * np.sin(th)) + ph)
    img = np.clip(img, 0.0, 1.0) * (1 + TEXTURE_AMPLITUDE / 2 * tex[..., None])

    gain = rng.uniform(0.7, 1.3)
    cast = rng.uniform(0.85, 1.15, 3)
    img = img * gain * cast[None, None, :]
    img = img + rng.normal(0.0, 0.02, img.shape)
    return np.clip(img, 0.0, 1.0).astype(np.float32)


def make_dataset(n_identities, images_per_identity, seed=0, prefix="id"):
    """Render a labelled toy dataset.

    Returns ``(pool, store)``: an :class:`IdentityPool` of references like
    ``"id0007/0003.png"`` and a :class:`MemoryImageStore` holding the pixels.
    """
    root = np.random.SeedSequence(seed)
    id_seq, img_seq = root.spawn(2)
    id_rng = np.random.default_rng(id_seq)
    images, store = {}, MemoryImageStore()
    for n, child in enumerate(img_seq.spawn(n_identities)):
        ident = random_identity(id_rng)
        name = f"{prefix}{n:04d}"
        rng = np.random.default_rng(child)
        refs = []
        for j in range(images_per_identity):
            ref = f"{name}/{j:04d}.png"
            store[ref] = render(ident, rng)
            refs.append(ref)
        images[name] = refs
    return IdentityPool(images), store


def write_dataset(pool, store, root):
    """Save a rendered dataset as one PNG directory per identity."""
    for refs in pool.images.values():
        for ref in refs:
            save_png(f"{root}/{ref}", store[ref])
