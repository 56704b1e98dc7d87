import json
import os

import numpy as np
import pytest

from limssr import data as D
from limssr.data import SyntheticConfig


def small(**kw):
    base = dict(num_samples=40, T=4, latent_dim=4, dims={"v": 6, "f": 5, "a": 3}, seed=9)
    base.update(kw)
    return SyntheticConfig(**base)


def test_deterministic():
    a, b = D.generate(small()), D.generate(small())
    assert a.ids == b.ids and np.array_equal(a.masks, b.masks) and np.array_equal(a.scores, b.scores)
    for m in "vfa":
        assert a.features[m].tobytes() == b.features[m].tobytes()
    c = D.generate(small(seed=10))
    assert not np.array_equal(a.scores, c.scores)


def test_shapes_and_ranges():
    ds = D.generate(small())
    assert ds.features["f"].shape == (40, 4, 5) and ds.features["f"].dtype == np.float32
    assert ds.masks.sum(1).min() >= 1
    y = ds.normalized_scores()
    assert np.all((y >= 0) & (y <= 1))


def test_zero_samples():
    with pytest.raises(ValueError):
        D.generate(small(num_samples=0))


def test_bad_mask_distribution():
    with pytest.raises(ValueError):
        small(mask_distribution={"vfa": 0.5, "v": 0.4})
    with pytest.raises(ValueError):
        small(mask_distribution={"vfa": 1.0, "q": 0.0})


def test_point_mass_full():
    ds = D.generate(small(mask_distribution={"vfa": 1.0}))
    assert np.all(ds.masks == 1)


def test_mask_frequencies_follow_distribution():
    ds = D.generate(small(num_samples=2000, mask_distribution={"v": 0.25, "vfa": 0.75}))
    full = np.all(ds.masks == 1, axis=1).mean()
    assert abs(full - 0.75) < 0.04
    assert set(map(tuple, ds.masks)) == {(1, 1, 1), (1, 0, 0)}


def test_noise_free_linear_recovery():
    cfg = small(num_samples=200, latent_dim=8, dims={"v": 16, "f": 16, "a": 16},
                noise_sigma={"v": 0.0, "f": 0.0, "a": 0.0})
    ds, z = D.generate(cfg, return_latents=True)
    X = ds.features["v"].astype(np.float64).mean(1)
    zbar = z.mean(1)
    A = np.c_[X, np.ones(len(X))]
    coef, *_ = np.linalg.lstsq(A, zbar, rcond=None)
    resid = zbar - A @ coef
    r2 = 1 - (resid**2).sum() / ((zbar - zbar.mean(0)) ** 2).sum()
    assert r2 > 0.999


def test_cross_modal_ridge_recoverability():
    ds = D.generate(SyntheticConfig(num_samples=512))
    Xv = ds.features["v"].astype(np.float64).mean(1)
    Xa = ds.features["a"].astype(np.float64).mean(1)
    tr, te = slice(0, 384), slice(384, 512)
    mu_x, mu_y = Xv[tr].mean(0), Xa[tr].mean(0)
    A, B = Xv[tr] - mu_x, Xa[tr] - mu_y
    W = np.linalg.solve(A.T @ A + 1.0 * np.eye(A.shape[1]), A.T @ B)
    pred = (Xv[te] - mu_x) @ W + mu_y
    r2 = 1 - ((Xa[te] - pred) ** 2).sum() / ((Xa[te] - Xa[te].mean(0)) ** 2).sum()
    assert r2 > 0.5


def test_normalize():
    assert D.normalize(65, 130) == 0.5
    assert D.normalize(100, 100) == 1.0
    y = np.random.default_rng(0).uniform(0, 130, 50)
    assert np.allclose(D.denormalize(D.normalize(y, 130), 130), y, atol=1e-9)
    with pytest.raises(ValueError):
        D.normalize(1.0, 0.0)
    with pytest.raises(ValueError):
        D.denormalize(1.0, -1.0)


def test_save_load_roundtrip(tmp_path):
    ds = D.generate(small())
    D.save(ds, tmp_path)
    back = D.load(tmp_path)
    assert back.ids == ds.ids and back.xi == ds.xi and back.seed == ds.seed
    assert np.array_equal(back.masks, ds.masks) and np.array_equal(back.scores, ds.scores)
    for m in "vfa":
        assert back.features[m].tobytes() == ds.features[m].tobytes()


def test_load_errors(tmp_path):
    with pytest.raises(D.ManifestNotFoundError, match="manifest not found"):
        D.load(tmp_path)
    ds = D.generate(small(num_samples=3))
    D.save(ds, tmp_path)
    # extra row in one feature file
    path = os.path.join(tmp_path, "features", f"{ds.ids[1]}_f.f32")
    np.concatenate([np.fromfile(path, "<f4"), np.zeros(5, "<f4")]).tofile(path)
    with pytest.raises(D.DimensionMismatchError, match=ds.ids[1] + "_f.f32"):
        D.load(tmp_path)
    os.remove(path)
    with pytest.raises(D.FeatureFileMissingError):
        D.load(tmp_path)
    man = os.path.join(tmp_path, "manifest.json")
    with open(man, "w") as fh:
        fh.write("{not json")
    with pytest.raises(D.ManifestError):
        D.load(tmp_path)
    with open(man, "w") as fh:
        json.dump({"format": D.FORMAT_NAME, "version": 99, "xi": 1, "T": 4, "dims": {}, "samples": []}, fh)
    with pytest.raises(D.ManifestError, match="version"):
        D.load(tmp_path)


def test_masked_access_refused():
    ds = D.generate(small(mask_distribution={"vf": 1.0}))
    assert set(ds.visible(0)) == {"v", "f"}
    with pytest.raises(D.MaskedAccessError):
        ds.modality_rows([0, 1], "a")
    assert ds.modality_rows([0, 1], "v").shape == (2, 4, 6)


def test_split_shares_world():
    tr, te = D.generate_split(small(), 10, 5)
    assert tr.ids[-1] == "s000009" and te.ids[0] == "s000010"
    whole = D.generate(small(num_samples=15))
    assert np.array_equal(np.r_[tr.scores, te.scores], whole.scores)
