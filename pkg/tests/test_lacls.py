import numpy as np
import pytest
import torch
import torch.nn.functional as F

from lacoste.config import LAClsConfig, PatchSpec, SceneConfig
from lacoste.errors import DataError, EmptySegmentError
from lacoste.io import save_component
from lacoste.lacls import (
    PatchClassifier,
    classify_patch,
    crop_and_mask,
    fit_patches,
    loss_lacls,
    train_lacls_offline,
)
from lacoste.synthdata import ObjectTrack, _inside, class_texture, generate_dataset

SMALL = LAClsConfig(patch=PatchSpec(size=32), embed_dim=32, num_layers=1, num_heads=2, epochs=2)


def test_full_mask_crop_is_resized_image():
    img = np.random.default_rng(0).random((3, 20, 20)).astype(np.float32)
    patch = crop_and_mask(img, np.ones((20, 20), bool), PatchSpec(size=32, expansion=1.0))
    ref = F.interpolate(torch.from_numpy(img)[None], size=(32, 32), mode="bilinear", align_corners=False)[0]
    assert np.allclose(patch, ref.numpy(), atol=1e-6)


def test_corner_square_keeps_texture_and_zeros_background():
    rng = np.random.default_rng(1)
    img = rng.uniform(0.5, 1.0, (3, 40, 40)).astype(np.float32)
    mask = np.zeros((40, 40), bool)
    mask[:10, :10] = True
    patch = crop_and_mask(img, mask, PatchSpec(size=64))
    # box is the clipped 11 x 11 square at the corner; the mask covers 10 / 11 of it
    assert np.all(patch[:, :50, :50] > 0)
    assert np.all(patch[:, -3:, :] == 0) and np.all(patch[:, :, -3:] == 0)


def test_translated_instance_gives_identical_patch():
    img = np.zeros((3, 48, 48), np.float32)
    img2 = np.zeros((3, 48, 48), np.float32)
    tex = np.random.default_rng(2).random((3, 7, 9)).astype(np.float32)
    img[:, 5:12, 6:15] = tex
    img2[:, 30:37, 20:29] = tex
    m1 = img.sum(0) > 0
    m2 = img2.sum(0) > 0
    a = crop_and_mask(img, m1, PatchSpec(size=32))
    b = crop_and_mask(img2, m2, PatchSpec(size=32))
    assert np.abs(a - b).mean() <= 1e-3


def test_empty_mask_signals_empty_segment():
    with pytest.raises(EmptySegmentError):
        crop_and_mask(np.zeros((3, 8, 8)), np.zeros((8, 8), bool))


def test_mean_fill():
    img = np.zeros((3, 8, 8), np.float32)
    img[:, 2:4, 2:4] = 0.5
    img[:, 0, 0] = 1.0
    mask = img[0] == 0.5
    patch = crop_and_mask(img, mask, PatchSpec(size=16, expansion=2.0, fill="mean"))
    assert np.allclose(patch, 0.5)


def test_classify_patch_normalized_deterministic_background_free():
    torch.manual_seed(0)
    model = PatchClassifier(SMALL, 3).eval()
    rng = np.random.default_rng(3)
    img = rng.random((3, 24, 24)).astype(np.float32)
    img2 = rng.random((3, 24, 24)).astype(np.float32)
    mask = np.zeros((24, 24), bool)
    mask[6:14, 8:18] = True
    img2[:, mask] = img[:, mask]  # same object, different background
    p1 = crop_and_mask(img, mask, SMALL.patch)
    p2 = crop_and_mask(img2, mask, SMALL.patch)
    e1, a1 = classify_patch(model, p1)
    e1b, a1b = classify_patch(model, p1)
    _, a2 = classify_patch(model, p2)
    assert a1.sum().item() == pytest.approx(1.0, abs=1e-6)
    assert torch.equal(a1, a1b) and torch.equal(e1, e1b)
    assert torch.max(torch.abs(a1 - a2)).item() <= 1e-6


def test_loss_zero_at_perfect_prediction():
    logits = torch.tensor([[50.0, -50.0, -50.0], [-50.0, -50.0, 50.0]], dtype=torch.float64)
    assert loss_lacls(logits, [1, 3]).item() == pytest.approx(0.0, abs=1e-12)


def _two_class_patches(n, size, seed):
    rng = np.random.default_rng(seed)
    patches = rng.normal(0, 0.05, (n, 3, size, size)).astype(np.float32)
    classes = rng.integers(1, 3, n)
    patches[classes == 1, 0] += 0.8
    patches[classes == 2, 2] += 0.8
    return patches, classes


def test_separable_two_class_set_reaches_full_accuracy():
    patches, classes = _two_class_patches(128, 32, 0)
    torch.manual_seed(0)
    model = PatchClassifier(SMALL, 2)
    fit_patches(model, patches, classes, SMALL, seed=0, epochs=6)
    with torch.no_grad():
        _, logits = model(torch.from_numpy(patches))
    acc = (logits[:, :2].argmax(1).numpy() + 1 == classes).mean()
    assert acc >= 0.99


def test_offline_training_is_bit_reproducible(tmp_path):
    clips = generate_dataset(SceneConfig(clip_length=2), 2)
    a, _ = train_lacls_offline(clips, SMALL, 4, seed=5, epochs=1)
    b, _ = train_lacls_offline(clips, SMALL, 4, seed=5, epochs=1)
    save_component(tmp_path / "a", "lacls", a)
    save_component(tmp_path / "b", "lacls", b)
    for f in sorted((tmp_path / "a" / "lacls").iterdir()):
        assert f.read_bytes() == (tmp_path / "b" / "lacls" / f.name).read_bytes()


def test_offline_training_rejects_empty_dataset():
    with pytest.raises(DataError):
        train_lacls_offline([], SMALL, 4)


@pytest.mark.slow
def test_argmax_is_location_invariant():
    scene = SceneConfig()
    clips = generate_dataset(scene, 12)
    model, _ = train_lacls_offline(clips, SMALL, 4, seed=0, epochs=3)
    rng = np.random.default_rng(0)
    agree = 0
    trials = 100
    yy, xx = np.mgrid[0:64, 0:64].astype(float)
    for k in range(trials):
        cls = int(rng.integers(1, 5))
        r = float(rng.uniform(7, 11))
        track = ObjectTrack(k, cls, 1.5, "ellipse", (r, 0.8 * r), float(rng.uniform(0, np.pi)), np.zeros((1, 2)))
        views = []
        for _ in range(2):
            cx, cy = rng.integers(13, 51, size=2).astype(float)
            inside = _inside(track, xx, yy, cx, cy)
            img = np.where(inside[None], class_texture(cls, xx - cx, yy - cy, track.angle), rng.random((3, 64, 64)))
            views.append(classify_patch(model, crop_and_mask(img.astype(np.float32), inside, SMALL.patch))[1])
        agree += int(views[0][:-1].argmax() == views[1][:-1].argmax())
    assert agree / trials >= 0.99
