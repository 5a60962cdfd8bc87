"""Frame-level feature extractor with statistics pooling.

Two per-frame leaky-rectifier layers (F -> H -> H), pooling to
[mean over time, std over time] (2H), then an affine projection to a
d-dimensional embedding.  All gradients are exact analytic derivatives,
accumulated additively into same-shape slots on the parameter object.
"""

from dataclasses import dataclass

import numpy as np

from . import rng
from .errors import EmptyDataError, NumericError, ShapeError, ValidationError

LEAKY_SLOPE = 0.01
STD_FLOOR = 1e-6  # std pooling computes sqrt(var + STD_FLOOR**2)


@dataclass
class EmbedderParams:
    w1: np.ndarray  # (H, F)
    b1: np.ndarray  # (H,)
    w2: np.ndarray  # (H, H)
    b2: np.ndarray  # (H,)
    wp: np.ndarray  # (d, 2H)
    bp: np.ndarray  # (d,)
    g_w1: np.ndarray = None
    g_b1: np.ndarray = None
    g_w2: np.ndarray = None
    g_b2: np.ndarray = None
    g_wp: np.ndarray = None
    g_bp: np.ndarray = None

    def __post_init__(self):
        for name in ("w1", "b1", "w2", "b2", "wp", "bp"):
            if getattr(self, "g_" + name) is None:
                setattr(self, "g_" + name, np.zeros_like(getattr(self, name)))

    @property
    def feat_dim(self):
        return self.w1.shape[1]

    @property
    def hidden_dim(self):
        return self.w1.shape[0]

    @property
    def embed_dim(self):
        return self.wp.shape[0]

    @property
    def dtype(self):
        return self.w1.dtype

    def tensors(self):
        """Parameter tensors in declaration order."""
        return [self.w1, self.b1, self.w2, self.b2, self.wp, self.bp]

    def grads(self):
        return [self.g_w1, self.g_b1, self.g_w2, self.g_b2, self.g_wp, self.g_bp]

    def zero_grads(self):
        for g in self.grads():
            g[...] = 0

    def copy(self, dtype=None):
        dtype = dtype or self.dtype
        return EmbedderParams(*[t.astype(dtype) for t in self.tensors()])

    def check_finite(self):
        for t in self.tensors():
            if not np.all(np.isfinite(t)):
                raise NumericError("non-finite value in embedder parameters")


def init_params(feat_dim, hidden_dim=64, embed_dim=32, seed=0, dtype=np.float32):
    """Glorot-uniform weights, zero biases, seeded."""
    shapes = [(hidden_dim, feat_dim), (hidden_dim, hidden_dim), (embed_dim, 2 * hidden_dim)]
    tensors = []
    for i, (fan_out, fan_in) in enumerate(shapes):
        bound = np.sqrt(6.0 / (fan_in + fan_out))
        w = rng.stream(seed, rng.INIT, i).uniform(-bound, bound, size=(fan_out, fan_in))
        tensors.append(w.astype(dtype))
        tensors.append(np.zeros(fan_out, dtype=dtype))
    return EmbedderParams(*tensors)


@dataclass
class ForwardCache:
    x: np.ndarray
    a1: np.ndarray
    z1: np.ndarray
    a2: np.ndarray
    z2: np.ndarray
    mean: np.ndarray
    std: np.ndarray
    pooled: np.ndarray
    batched: bool


def _lrelu(a):
    return np.where(a > 0, a, LEAKY_SLOPE * a)


def _lrelu_grad(a):
    one = np.asarray(1.0, dtype=a.dtype)
    slope = np.asarray(LEAKY_SLOPE, dtype=a.dtype)
    return np.where(a > 0, one, slope)


def forward(params: EmbedderParams, features):
    """Embed one utterance (T, F); returns (embedding, cache)."""
    features = np.asarray(features, dtype=params.dtype)
    if features.ndim != 2:
        raise ShapeError(f"features must be (T, F), got shape {features.shape}")
    if features.shape[0] == 0:
        raise EmptyDataError("utterance has no frames")
    emb, cache = forward_batch(params, features[None])
    cache.batched = False
    return emb[0], cache


def forward_batch(params: EmbedderParams, features):
    """Embed a batch (B, T, F) of equal-length utterances; returns ((B, d), cache)."""
    x = np.asarray(features, dtype=params.dtype)
    if x.ndim != 3:
        raise ShapeError(f"batch features must be (B, T, F), got shape {x.shape}")
    if x.shape[1] == 0:
        raise EmptyDataError("utterances have no frames")
    if x.shape[2] != params.feat_dim:
        raise ShapeError(f"feature dim {x.shape[2]} does not match model F={params.feat_dim}")

    a1 = x @ params.w1.T + params.b1
    z1 = _lrelu(a1)
    a2 = z1 @ params.w2.T + params.b2
    z2 = _lrelu(a2)
    mean = z2.mean(axis=1)
    var = np.mean((z2 - mean[:, None, :]) ** 2, axis=1)
    std = np.sqrt(var + np.asarray(STD_FLOOR, dtype=x.dtype) ** 2)
    pooled = np.concatenate([mean, std], axis=1)
    h = pooled @ params.wp.T + params.bp
    cache = ForwardCache(x, a1, z1, a2, z2, mean, std, pooled, batched=True)
    return h, cache


def backward(params: EmbedderParams, cache: ForwardCache, grad_embedding):
    """Accumulate parameter gradients for one utterance or a batch.

    ``grad_embedding`` is (d,) for a single-utterance cache or (B, d) for a
    batched one.  Repeated calls accumulate additively; the input features
    are leaves, so nothing is returned.
    """
    g = np.asarray(grad_embedding, dtype=params.dtype)
    if not cache.batched:
        if g.shape != (params.embed_dim,):
            raise ShapeError(f"grad_embedding must be ({params.embed_dim},), got {g.shape}")
        g = g[None]
    elif g.shape != (cache.x.shape[0], params.embed_dim):
        raise ShapeError(f"grad_embedding shape {g.shape} does not match cached batch")

    h = params.hidden_dim
    t = cache.x.shape[1]

    params.g_wp += g.T @ cache.pooled
    params.g_bp += g.sum(axis=0)
    g_pooled = g @ params.wp
    g_mean = g_pooled[:, :h]
    g_std = g_pooled[:, h:]

    centered = cache.z2 - cache.mean[:, None, :]
    g_z2 = g_mean[:, None, :] / t + (g_std / cache.std)[:, None, :] * centered / t

    g_a2 = g_z2 * _lrelu_grad(cache.a2)
    params.g_w2 += np.einsum("bth,btk->hk", g_a2, cache.z1)
    params.g_b2 += g_a2.sum(axis=(0, 1))
    g_z1 = g_a2 @ params.w2
    g_a1 = g_z1 * _lrelu_grad(cache.a1)
    params.g_w1 += np.einsum("bth,btf->hf", g_a1, cache.x)
    params.g_b1 += g_a1.sum(axis=(0, 1))


def finite_diff_check(params, features, loss_closure, epsilon=1e-5, n_coords=100, seed=0):
    """Compare analytic parameter gradients to central finite differences.

    ``loss_closure`` maps an embedding to ``(loss, grad_wrt_embedding)``;
    the analytic side seeds ``backward`` with that gradient while the
    numeric side only ever evaluates the scalar loss.  Returns the max
    relative error over at least ``n_coords`` sampled coordinates.
    """
    if not (0 < epsilon <= 1e-2):
        raise ValidationError(f"epsilon must be in (0, 1e-2], got {epsilon!r}")

    def scalar_loss(p):
        emb, _ = forward(p, features)
        loss = loss_closure(emb)[0]
        if not np.isfinite(loss):
            raise NumericError("loss_closure returned a non-finite loss")
        return float(loss)

    work = params.copy(np.float64)
    work.zero_grads()
    emb, cache = forward(work, features)
    _, grad_h = loss_closure(emb)
    backward(work, cache, np.asarray(grad_h, dtype=np.float64))

    coords = []
    for ti, tensor in enumerate(work.tensors()):
        for flat in range(tensor.size):
            coords.append((ti, flat))
    g = rng.stream(seed, rng.INIT, 99)
    if len(coords) > n_coords:
        chosen = g.choice(len(coords), size=n_coords, replace=False)
        coords = [coords[int(i)] for i in chosen]

    max_rel = 0.0
    tensors = work.tensors()
    grads = work.grads()
    for ti, flat in coords:
        tensor = tensors[ti].reshape(-1)
        orig = tensor[flat]
        tensor[flat] = orig + epsilon
        lp = scalar_loss(work)
        tensor[flat] = orig - epsilon
        lm = scalar_loss(work)
        tensor[flat] = orig
        numeric = (lp - lm) / (2 * epsilon)
        analytic = grads[ti].reshape(-1)[flat]
        rel = abs(analytic - numeric) / max(abs(analytic), abs(numeric), 1e-8)
        max_rel = max(max_rel, rel)
    return max_rel
