"""k-means codebooks for discrete frame targets."""
from __future__ import annotations

from dataclasses import dataclass, field

import numpy as np

from . import io as fio


@dataclass
class Codebook:
    centroids: np.ndarray
    source: str = "mfcc"
    distortions: list = field(default_factory=list)

    def __post_init__(self):
        self.centroids = np.asarray(self.centroids, dtype=np.float64)
        if self.centroids.ndim != 2 or len(self.centroids) < 1:
            raise ValueError("centroids must be a non-empty K x D matrix")
        if not np.all(np.isfinite(self.centroids)):
            raise ValueError("centroids must be finite")

    @property
    def K(self):
        return self.centroids.shape[0]

    @property
    def feature_dim(self):
        return self.centroids.shape[1]

    def save(self, path):
        fio.save_codebook(path, self.centroids)

    @classmethod
    def load(cls, path, source="mfcc"):
        return cls(fio.load_codebook_array(path), source)


@dataclass
class CodeSequence:
    codes: np.ndarray
    vocab_size: int
    utt_id: str = ""

    def __post_init__(self):
        self.codes = np.asarray(self.codes, dtype=np.int64)
        if self.codes.size and (self.codes.min() < 0 or self.codes.max() >= self.vocab_size):
            raise ValueError(f"codes of {self.utt_id!r} fall outside [0, {self.vocab_size})")

    def __len__(self):
        return len(self.codes)


def sq_distances(x, c, chunk=4096):
    """Exact squared Euclidean distances ``(N, K)`` by direct differencing."""
    out = np.empty((len(x), len(c)))
    for s in range(0, len(x), chunk):
        diff = x[s : s + chunk, None, :] - c[None, :, :]
        out[s : s + chunk] = np.einsum("nkd,nkd->nk", diff, diff)
    return out


def nearest(x, c):
    d = sq_distances(x, c)
    idx = np.argmin(d, axis=1)  # first minimum -> lowest index on ties
    return idx, d[np.arange(len(x)), idx]


def _kmeanspp(x, k, rng):
    n = len(x)
    centers = [x[rng.integers(n)]]
    d2 = sq_distances(x, np.array(centers))[:, 0]
    for _ in range(1, k):
        total = d2.sum()
        if total <= 0:
            i = rng.integers(n)
        else:
            i = rng.choice(n, p=d2 / total)
        centers.append(x[i])
        d2 = np.minimum(d2, sq_distances(x, x[i : i + 1])[:, 0])
    return np.array(centers)


def _lloyd(x, centers, max_iters, tol):
    history = []
    idx, dist = nearest(x, centers)
    history.append(float(dist.mean()))
    for _ in range(max_iters):
        new = centers.copy()
        counts = np.bincount(idx, minlength=len(centers))
        sums = np.zeros_like(centers)
        np.add.at(sums, idx, x)
        filled = counts > 0
        new[filled] = sums[filled] / counts[filled, None]
        for j in np.flatnonzero(~filled):
            # empty cluster: move it onto the point farthest from its centroid
            far = int(np.argmax(dist))
            new[j] = x[far]
            dist[far] = 0.0
            idx[far] = j
        idx, dist = nearest(x, new)
        d = float(dist.mean())
        if d > history[-1]:
            # rounding in the mean update can nudge distortion up by an ulp; keep the old solution
            break
        centers = new
        history.append(d)
        if history[-2] == 0 or (history[-2] - d) / history[-2] < tol:
            break
    return centers, history


def fit_kmeans(features, k, max_iters=100, seed=0, n_init=1, tol=1e-6, source="mfcc"):
    """Lloyd's algorithm from k-means++ seeds; best of ``n_init`` runs by distortion.

    ``Codebook.distortions`` records the per-iteration mean squared distance of
    the winning run, which never increases.
    """
    x = np.asarray(features, dtype=np.float64)
    if x.ndim != 2:
        raise ValueError(f"features must be N x D, got shape {x.shape}")
    if k < 1 or len(x) < k:
        raise ValueError(f"need at least K={k} points, got {len(x)}")
    if len(np.unique(x, axis=0)) < k:
        raise ValueError(f"need at least K={k} distinct points")
    rng = np.random.default_rng(seed)
    best = None
    for _ in range(max(1, n_init)):
        centers, hist = _lloyd(x, _kmeanspp(x, k, rng), max_iters, tol)
        if best is None or hist[-1] < best[1][-1]:
            best = (centers, hist)
    return Codebook(best[0], source, best[1])


def assign(cb: Codebook, frames, utt_id="") -> CodeSequence:
    frames = np.asarray(frames, dtype=np.float64)
    if frames.ndim != 2 or frames.shape[1] != cb.feature_dim:
        raise ValueError(f"feature dim {frames.shape[-1]} does not match codebook dim {cb.feature_dim}")
    if len(frames) == 0:
        return CodeSequence(np.zeros(0, dtype=np.int64), cb.K, utt_id)
    idx, _ = nearest(frames, cb.centroids)
    return CodeSequence(idx, cb.K, utt_id)


def distortion(cb: Codebook, frames):
    _, d = nearest(np.asarray(frames, dtype=np.float64), cb.centroids)
    return float(d.mean())


def layer_features(model, corpus, layer):
    """Hidden states of ``layer`` for each utterance (eval mode, no masking)."""
    n_layers = model.cfg.layers
    if not 0 <= layer <= n_layers:
        raise ValueError(f"layer {layer} out of range 0..{n_layers}")
    return [model.hidden_states(frames)[layer] for frames in corpus]


def recluster_from_layer(model, layer, corpus, k, seed=0, max_iters=100, n_init=1):
    """Second-iteration codebook: k-means over learned layer activations."""
    feats = layer_features(model, corpus, layer)
    return fit_kmeans(np.concatenate(feats, axis=0), k, max_iters=max_iters, seed=seed,
                      n_init=n_init, source=f"layer:{layer}")
