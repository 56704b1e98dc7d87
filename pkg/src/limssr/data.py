"""Synthetic latent-factor multimodal dataset and its on-disk format.

Every modality is a noisy linear view of a shared, AR(1)-smoothed latent
trajectory; the score is a smooth function of the trajectory mean.  So a
missing modality is recoverable in principle from the ones that remain.

Directory layout (see FORMAT.md)::

    manifest.json
    features/<id>_<modality>.f32   little-endian float32, row-major (T, d_m)
"""

import json
import os
from dataclasses import asdict, dataclass, field

import numpy as np

from .numerics.rng import make_rng
from .pcmi import CONDITIONS, MODALITIES, mask_from_condition, validate_mask

FORMAT_NAME = "limssr-features"
FORMAT_VERSION = 1
GENERATOR_VERSION = 1
AR_COEF = 0.8


class DatasetError(Exception):
    """Base class for dataset problems."""


class ManifestNotFoundError(DatasetError, FileNotFoundError):
    pass


class ManifestError(DatasetError, ValueError):
    pass


class FeatureFileMissingError(DatasetError, FileNotFoundError):
    pass


class DimensionMismatchError(DatasetError, ValueError):
    pass


class MaskedAccessError(DatasetError, PermissionError):
    """Raised when model-facing code asks for a masked-out modality."""


@dataclass
class SyntheticConfig:
    num_samples: int = 512
    T: int = 8
    latent_dim: int = 8
    dims: dict = field(default_factory=lambda: {"v": 16, "f": 16, "a": 16})
    noise_sigma: dict = field(default_factory=lambda: {"v": 0.3, "f": 0.3, "a": 0.3})
    # probability per subset, keyed by condition name ("vf", "v", ...)
    mask_distribution: dict = field(default_factory=lambda: {c: 1.0 / 7 for c in CONDITIONS})
    seed: int = 0
    xi: float = 100.0
    start_index: int = 0

    def __post_init__(self):
        probs = np.array([self.mask_distribution.get(c, 0.0) for c in CONDITIONS], dtype=np.float64)
        unknown = set(self.mask_distribution) - set(CONDITIONS)
        if unknown:
            raise ValueError(f"mask_distribution has unknown subsets {sorted(unknown)}")
        if (probs < 0).any() or abs(probs.sum() - 1.0) > 1e-12:
            raise ValueError(f"mask_distribution must be nonnegative and sum to 1, got sum {probs.sum()!r}")
        if self.xi <= 0:
            raise ValueError("xi must be positive")


@dataclass
class FeatureDataset:
    ids: list
    features: dict  # modality -> float32 array (N, T, d_m); all modalities kept
    masks: np.ndarray  # (N, 3) int8
    scores: np.ndarray  # (N,) raw scores
    xi: float
    seed: int = 0
    meta: dict = field(default_factory=dict)

    def __len__(self):
        return len(self.ids)

    @property
    def T(self):
        return next(iter(self.features.values())).shape[1]

    @property
    def dims(self):
        return {m: self.features[m].shape[2] for m in MODALITIES}

    def normalized_scores(self):
        return normalize(self.scores, self.xi)

    def with_mask(self, mask):
        """Copy sharing feature storage with every sample's mask set to ``mask``."""
        mask = validate_mask(mask)
        masks = np.tile(np.asarray(mask, dtype=np.int8), (len(self), 1))
        return FeatureDataset(self.ids, self.features, masks, self.scores, self.xi, self.seed, dict(self.meta))

    def subset(self, index):
        index = np.asarray(index, dtype=np.int64)
        return FeatureDataset(
            [self.ids[i] for i in index],
            {m: x[index] for m, x in self.features.items()},
            self.masks[index],
            self.scores[index],
            self.xi,
            self.seed,
            dict(self.meta),
        )

    # -- model-facing access -------------------------------------------------

    def visible(self, i):
        """Features of sample ``i`` for its available modalities only."""
        return {m: self.features[m][i] for m, bit in zip(MODALITIES, self.masks[i]) if bit}

    def modality_rows(self, index, modality):
        """Stack modality features for samples ``index``; all must have it available."""
        j = MODALITIES.index(modality)
        index = np.asarray(index, dtype=np.int64)
        hidden = index[self.masks[index, j] == 0]
        if hidden.size:
            raise MaskedAccessError(
                f"modality {modality!r} is masked out for samples {[self.ids[i] for i in hidden[:5]]}"
            )
        return self.features[modality][index]


def normalize(y, xi):
    if xi <= 0:
        raise ValueError(f"xi must be positive, got {xi}")
    return np.asarray(y, dtype=np.float64) / xi


def denormalize(y_norm, xi):
    if xi <= 0:
        raise ValueError(f"xi must be positive, got {xi}")
    return np.asarray(y_norm, dtype=np.float64) * xi


# ---------------------------------------------------------------------------
# generation
# ---------------------------------------------------------------------------


def world_params(cfg):
    """Per-dataset constants (loading matrices, score weights) from the seed."""
    rng = make_rng(cfg.seed, "world")
    L = cfg.latent_dim
    W = {m: rng.normal(0.0, 1.0 / np.sqrt(L), size=(cfg.dims[m], L)) for m in MODALITIES}
    u = rng.normal(0.0, np.sqrt(2.0 / L), size=L)
    v = rng.normal(0.0, 1.0 / np.sqrt(L), size=L)
    # centre the quadratic term on its typical magnitude
    b = 0.5 * _mean_var(cfg.T) * float(v @ v) + 0.1 * rng.normal()
    return {"W": W, "u": u, "v": v, "b": b}


def _mean_var(T):
    """Variance of the time-average of a unit-variance AR(1) trajectory."""
    k = np.arange(T)
    return float(np.sum(AR_COEF ** np.abs(k[:, None] - k[None, :]))) / T**2


def latent_trajectory(rng, T, L):
    z = np.empty((T, L))
    z[0] = rng.normal(size=L)
    s = np.sqrt(1.0 - AR_COEF**2)
    for t in range(1, T):
        z[t] = AR_COEF * z[t - 1] + s * rng.normal(size=L)
    return z


def generate(cfg, return_latents=False):
    if cfg.num_samples <= 0:
        raise ValueError("generate: num_samples must be positive")
    wp = world_params(cfg)
    probs = np.array([cfg.mask_distribution.get(c, 0.0) for c in CONDITIONS])
    probs = probs / probs.sum()
    subset_masks = [mask_from_condition(c) for c in CONDITIONS]
    N, T = cfg.num_samples, cfg.T
    feats = {m: np.empty((N, T, cfg.dims[m]), dtype=np.float32) for m in MODALITIES}
    masks = np.empty((N, 3), dtype=np.int8)
    scores = np.empty(N)
    latents = np.empty((N, T, cfg.latent_dim))
    ids = []
    for n in range(N):
        idx = cfg.start_index + n
        rng = make_rng(cfg.seed, "data", idx)
        z = latent_trajectory(rng, T, cfg.latent_dim)
        latents[n] = z
        for m in MODALITIES:
            noise = rng.normal(size=(T, cfg.dims[m]))
            feats[m][n] = z @ wp["W"][m].T + cfg.noise_sigma[m] * noise
        zbar = z.mean(axis=0)
        pre = wp["u"] @ zbar + 0.5 * (wp["v"] @ zbar) ** 2 - wp["b"]
        scores[n] = cfg.xi / (1.0 + np.exp(-pre))
        mrng = make_rng(cfg.seed, "masks", idx)
        masks[n] = subset_masks[int(mrng.choice(len(CONDITIONS), p=probs))]
        ids.append(f"s{idx:06d}")
    meta = {"generator_version": GENERATOR_VERSION, "config": _config_dict(cfg)}
    ds = FeatureDataset(ids, feats, masks, scores, float(cfg.xi), cfg.seed, meta)
    return (ds, latents) if return_latents else ds


def generate_split(cfg, n_train, n_test):
    """Train and test sets drawn from the same world parameters."""
    d = asdict(cfg)
    train = generate(SyntheticConfig(**{**d, "num_samples": n_train, "start_index": 0}))
    test = generate(SyntheticConfig(**{**d, "num_samples": n_test, "start_index": n_train}))
    return train, test


def _config_dict(cfg):
    d = asdict(cfg)
    d["dims"] = dict(cfg.dims)
    d["noise_sigma"] = dict(cfg.noise_sigma)
    return d


# ---------------------------------------------------------------------------
# storage
# ---------------------------------------------------------------------------


def save(ds, directory):
    os.makedirs(os.path.join(directory, "features"), exist_ok=True)
    samples = []
    for i, sid in enumerate(ds.ids):
        samples.append({"id": sid, "mask": [int(b) for b in ds.masks[i]], "score": float(ds.scores[i])})
        for m in MODALITIES:
            arr = np.ascontiguousarray(ds.features[m][i], dtype="<f4")
            arr.tofile(os.path.join(directory, "features", f"{sid}_{m}.f32"))
    manifest = {
        "format": FORMAT_NAME,
        "version": FORMAT_VERSION,
        "generator_version": ds.meta.get("generator_version", GENERATOR_VERSION),
        "seed": int(ds.seed),
        "xi": float(ds.xi),
        "T": int(ds.T),
        "modalities": list(MODALITIES),
        "dims": {m: int(d) for m, d in ds.dims.items()},
        "samples": samples,
        "config": ds.meta.get("config", {}),
    }
    with open(os.path.join(directory, "manifest.json"), "w") as fh:
        json.dump(manifest, fh, indent=1)


def load(directory):
    path = os.path.join(directory, "manifest.json")
    if not os.path.isfile(path):
        raise ManifestNotFoundError(f"manifest not found: {path}")
    try:
        with open(path) as fh:
            man = json.load(fh)
    except json.JSONDecodeError as exc:
        raise ManifestError(f"malformed manifest {path}: {exc}") from None
    for key in ("format", "version", "xi", "T", "dims", "samples"):
        if key not in man:
            raise ManifestError(f"manifest {path} lacks required field {key!r}")
    if man["format"] != FORMAT_NAME:
        raise ManifestError(f"manifest {path}: unexpected format {man['format']!r}")
    if man["version"] != FORMAT_VERSION:
        raise ManifestError(f"manifest {path}: unsupported version {man['version']!r}")
    T = int(man["T"])
    dims = {m: int(man["dims"][m]) for m in MODALITIES}
    N = len(man["samples"])
    feats = {m: np.empty((N, T, dims[m]), dtype=np.float32) for m in MODALITIES}
    masks = np.empty((N, 3), dtype=np.int8)
    scores = np.empty(N)
    ids = []
    for i, s in enumerate(man["samples"]):
        try:
            sid, mask, score = s["id"], s["mask"], s["score"]
        except (KeyError, TypeError):
            raise ManifestError(f"manifest {path}: sample entry {i} is malformed") from None
        try:
            masks[i] = validate_mask(mask)
        except ValueError as exc:
            raise ManifestError(f"manifest {path}: sample {sid}: {exc}") from None
        scores[i] = float(score)
        ids.append(sid)
        for m in MODALITIES:
            fpath = os.path.join(directory, "features", f"{sid}_{m}.f32")
            if not os.path.isfile(fpath):
                raise FeatureFileMissingError(f"missing feature file {fpath}")
            raw = np.fromfile(fpath, dtype="<f4")
            if raw.size != T * dims[m]:
                rows = raw.size / dims[m]
                raise DimensionMismatchError(
                    f"{fpath}: holds {raw.size} floats ({rows:g} rows of {dims[m]}), manifest declares T={T}"
                )
            feats[m][i] = raw.reshape(T, dims[m])
    meta = {"generator_version": man.get("generator_version"), "config": man.get("config", {})}
    return FeatureDataset(ids, feats, masks, scores, float(man["xi"]), int(man.get("seed", 0)), meta)
