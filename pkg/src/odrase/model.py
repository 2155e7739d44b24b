"""Cross-attention grounding classifier over frozen token embeddings.

Forward pass for one sample (text tokens ``S``, visual tokens ``S'``):

    T = E_t W_t + b_t                       (S, d)
    I = P (E_i W_i + b_i)                   (S, d)   P: (S, S') token alignment
    head h: A_h = softmax((I W_Q^h)(T W_K^h)^T / sqrt(d_k)),  O_h = A_h (T W_V^h)
    out = concat_h(O_h) W_O                 (S, d)
    c = mean over rows of out               (d,)
    p = sigmoid(c W_c + b_c)                (C,)

Training minimises the mean over the batch of the per-sample multi-label
binary cross-entropy. The embeddings are inputs, never parameters, so the
encoders that produced them stay frozen by construction. All arithmetic runs
in float64; gradients are derived by hand.
"""

from __future__ import annotations

import logging
from dataclasses import dataclass, field
from typing import Callable, Iterable, Sequence

import numpy as np

log = logging.getLogger(__name__)

EPS = 1e-7

PARAM_NAMES = (
    "text_proj", "text_bias",
    "img_embed_proj", "img_embed_bias",
    "img_token_proj",
    "w_q", "w_k", "w_v", "w_o",
    "head", "head_bias",
)


class ShapeError(ValueError):
    pass


class TrainingError(RuntimeError):
    pass


@dataclass
class ModelParams:
    text_proj: np.ndarray       # (text_dim, d)
    text_bias: np.ndarray       # (d,)
    img_embed_proj: np.ndarray  # (image_dim, d)
    img_embed_bias: np.ndarray  # (d,)
    img_token_proj: np.ndarray  # (S, S') maps visual tokens onto text positions
    w_q: np.ndarray             # (d, d); columns h*d_k:(h+1)*d_k belong to head h
    w_k: np.ndarray
    w_v: np.ndarray
    w_o: np.ndarray
    head: np.ndarray            # (d, C)
    head_bias: np.ndarray       # (C,)
    n_heads: int = 1

    def __post_init__(self) -> None:
        d = self.text_proj.shape[1]
        if d % self.n_heads:
            raise ShapeError(f"d={d} is not divisible by n_heads={self.n_heads}")
        expected = {
            "text_bias": (d,),
            "img_embed_bias": (d,),
            "w_q": (d, d), "w_k": (d, d), "w_v": (d, d), "w_o": (d, d),
            "head_bias": (self.head.shape[1],),
        }
        if self.img_embed_proj.shape[1] != d or self.head.shape[0] != d:
            raise ShapeError("projection widths disagree with d")
        for name, shape in expected.items():
            if getattr(self, name).shape != shape:
                raise ShapeError(f"{name} has shape {getattr(self, name).shape}, expected {shape}")
        for name in PARAM_NAMES:
            if not np.all(np.isfinite(getattr(self, name))):
                raise ValueError(f"parameter {name} is not finite")

    @property
    def d(self) -> int:
        return self.text_proj.shape[1]

    @property
    def d_k(self) -> int:
        return self.d // self.n_heads

    @property
    def n_classes(self) -> int:
        return self.head.shape[1]

    @property
    def seq_len(self) -> int:
        return self.img_token_proj.shape[0]

    @property
    def image_tokens(self) -> int:
        return self.img_token_proj.shape[1]

    def arrays(self) -> dict[str, np.ndarray]:
        return {name: getattr(self, name) for name in PARAM_NAMES}

    def copy(self) -> "ModelParams":
        return ModelParams(**{k: v.copy() for k, v in self.arrays().items()}, n_heads=self.n_heads)

    def n_scalars(self) -> int:
        return sum(a.size for a in self.arrays().values())


def init_params(
    text_dim: int,
    image_dim: int,
    seq_len: int,
    image_tokens: int,
    d: int,
    n_heads: int,
    n_classes: int,
    rng: np.random.Generator,
) -> ModelParams:
    """Uniform(-1/sqrt(fan_in), 1/sqrt(fan_in)) initialisation; biases share their matrix's fan-in."""

    def u(fan_in: int, *shape: int) -> np.ndarray:
        bound = 1.0 / np.sqrt(fan_in)
        return rng.uniform(-bound, bound, size=shape)

    return ModelParams(
        text_proj=u(text_dim, text_dim, d),
        text_bias=u(text_dim, d),
        img_embed_proj=u(image_dim, image_dim, d),
        img_embed_bias=u(image_dim, d),
        img_token_proj=u(image_tokens, seq_len, image_tokens),
        w_q=u(d, d, d),
        w_k=u(d, d, d),
        w_v=u(d, d, d),
        w_o=u(d, d, d),
        head=u(d, d, n_classes),
        head_bias=u(d, n_classes),
        n_heads=n_heads,
    )


# ---------------------------------------------------------------------------
# building blocks; each accepts a single sample (2-D) or a batch (3-D)


def project_inputs(text: np.ndarray, image: np.ndarray, params: ModelParams) -> tuple[np.ndarray, np.ndarray]:
    text = np.asarray(text, dtype=np.float64)
    image = np.asarray(image, dtype=np.float64)
    if text.shape[-1] != params.text_proj.shape[0]:
        raise ShapeError(f"text embedding width {text.shape[-1]} != {params.text_proj.shape[0]}")
    if image.shape[-1] != params.img_embed_proj.shape[0]:
        raise ShapeError(f"image embedding width {image.shape[-1]} != {params.img_embed_proj.shape[0]}")
    if text.shape[-2] != params.seq_len:
        raise ShapeError(f"text has {text.shape[-2]} tokens, model expects {params.seq_len}")
    if image.shape[-2] != params.image_tokens:
        raise ShapeError(f"image has {image.shape[-2]} tokens, model expects {params.image_tokens}")
    t = text @ params.text_proj + params.text_bias
    ie = image @ params.img_embed_proj + params.img_embed_bias
    i = np.einsum("st,...td->...sd", params.img_token_proj, ie)
    return t, i


def softmax(x: np.ndarray, axis: int = -1) -> np.ndarray:
    z = x - np.max(x, axis=axis, keepdims=True)
    e = np.exp(z)
    return e / np.sum(e, axis=axis, keepdims=True)


def _split_heads(x: np.ndarray, n_heads: int) -> np.ndarray:
    # (..., S, d) -> (..., H, S, d_k)
    *lead, s, d = x.shape
    return np.moveaxis(x.reshape(*lead, s, n_heads, d // n_heads), -2, -3)


def _merge_heads(x: np.ndarray) -> np.ndarray:
    # (..., H, S, d_k) -> (..., S, d)
    x = np.moveaxis(x, -3, -2)
    *lead, s, h, dk = x.shape
    return x.reshape(*lead, s, h * dk)


def attention_weights(q: np.ndarray, k: np.ndarray, params: ModelParams) -> np.ndarray:
    """Per-head attention matrices, shape (..., H, S_q, S_k)."""
    qh = _split_heads(q @ params.w_q, params.n_heads)
    kh = _split_heads(k @ params.w_k, params.n_heads)
    scores = qh @ np.swapaxes(kh, -1, -2) / np.sqrt(params.d_k)
    return softmax(scores)


def cross_attention(q: np.ndarray, k: np.ndarray, v: np.ndarray, params: ModelParams) -> np.ndarray:
    q, k, v = (np.asarray(a, dtype=np.float64) for a in (q, k, v))
    if k.shape != v.shape:
        raise ShapeError("keys and values must share a shape")
    if q.shape[-1] != params.d or k.shape[-1] != params.d:
        raise ShapeError("attention inputs must have width d")
    a = attention_weights(q, k, params)
    vh = _split_heads(v @ params.w_v, params.n_heads)
    out = _merge_heads(a @ vh) @ params.w_o
    if not np.all(np.isfinite(out)):
        raise FloatingPointError("non-finite attention output; check input embeddings")
    return out


def sigmoid(x: np.ndarray) -> np.ndarray:
    x = np.asarray(x, dtype=np.float64)
    out = np.empty_like(x)
    pos = x >= 0
    out[pos] = 1.0 / (1.0 + np.exp(-x[pos]))
    ex = np.exp(x[~pos])
    out[~pos] = ex / (1.0 + ex)
    return out


def pool_and_classify(attn_out: np.ndarray, params: ModelParams) -> tuple[np.ndarray, np.ndarray]:
    c = np.mean(attn_out, axis=-2)
    logits = c @ params.head + params.head_bias
    return sigmoid(logits), logits


def bce_loss(probs: np.ndarray, y: np.ndarray) -> float | np.ndarray:
    """Summed multi-label BCE; a 2-D input gives one loss per row."""
    probs = np.asarray(probs, dtype=np.float64)
    y = np.asarray(y, dtype=np.float64)
    if probs.shape != y.shape:
        raise ShapeError(f"probabilities {probs.shape} and labels {y.shape} differ in shape")
    p = np.clip(probs, EPS, 1.0 - EPS)
    loss = -np.sum(y * np.log(p) + (1.0 - y) * np.log1p(-p), axis=-1)
    return float(loss) if loss.ndim == 0 else loss


# ---------------------------------------------------------------------------
# full forward / backward over a batch


@dataclass
class _Cache:
    xt: np.ndarray
    xi: np.ndarray
    t: np.ndarray
    ie: np.ndarray
    i: np.ndarray
    qh: np.ndarray
    kh: np.ndarray
    vh: np.ndarray
    a: np.ndarray
    merged: np.ndarray
    out: np.ndarray
    c: np.ndarray
    probs: np.ndarray


def _as_batch(x: np.ndarray) -> np.ndarray:
    x = np.asarray(x, dtype=np.float64)
    return x[None] if x.ndim == 2 else x


def forward(
    text: np.ndarray, image: np.ndarray, params: ModelParams, bypass_attention: bool = False
) -> tuple[np.ndarray, _Cache]:
    """Batched forward pass; returns probabilities (B, C) and the backward cache.

    With ``bypass_attention`` the grounding block is replaced by ``T + I``,
    leaving an affine model that is handy for checking gradients.
    """
    xt, xi = _as_batch(text), _as_batch(image)
    t, i = project_inputs(xt, xi, params)
    ie = xi @ params.img_embed_proj + params.img_embed_bias
    if bypass_attention:
        qh = kh = vh = a = merged = np.empty(0)
        out = t + i
    else:
        h = params.n_heads
        qh = _split_heads(i @ params.w_q, h)
        kh = _split_heads(t @ params.w_k, h)
        vh = _split_heads(t @ params.w_v, h)
        a = softmax(qh @ np.swapaxes(kh, -1, -2) / np.sqrt(params.d_k))
        merged = _merge_heads(a @ vh)
        out = merged @ params.w_o
    probs, _ = pool_and_classify(out, params)
    c = np.mean(out, axis=-2)
    return probs, _Cache(xt, xi, t, ie, i, qh, kh, vh, a, merged, out, c, probs)


def batch_loss(probs: np.ndarray, y: np.ndarray) -> float:
    return float(np.mean(bce_loss(probs, np.asarray(y, dtype=np.float64).reshape(probs.shape))))


def backward(cache: _Cache, y: np.ndarray, params: ModelParams, bypass_attention: bool = False) -> dict[str, np.ndarray]:
    """Gradients of the mean batch loss with respect to every parameter."""
    probs = cache.probs
    y = np.asarray(y, dtype=np.float64).reshape(probs.shape)
    b, s = cache.out.shape[0], cache.out.shape[1]
    # d/dlogit of BCE through sigmoid is p - y; zero where the clamp is active
    active = (probs > EPS) & (probs < 1.0 - EPS)
    dz = (probs - y) * active / b
    g = {
        "head": cache.c.T @ dz,
        "head_bias": dz.sum(axis=0),
    }
    dc = dz @ params.head.T
    dout = np.broadcast_to(dc[:, None, :] / s, cache.out.shape)

    if bypass_attention:
        dt = dout
        di = dout
        for name in ("w_q", "w_k", "w_v", "w_o"):
            g[name] = np.zeros_like(getattr(params, name))
    else:
        g["w_o"] = np.einsum("bsi,bsj->ij", cache.merged, dout)
        dmerged = dout @ params.w_o.T
        doh = _split_heads(dmerged, params.n_heads)
        da = doh @ np.swapaxes(cache.vh, -1, -2)
        dvh = np.swapaxes(cache.a, -1, -2) @ doh
        dscores = cache.a * (da - np.sum(da * cache.a, axis=-1, keepdims=True))
        dscores /= np.sqrt(params.d_k)
        dqh = dscores @ cache.kh
        dkh = np.swapaxes(dscores, -1, -2) @ cache.qh
        dq, dk, dv = _merge_heads(dqh), _merge_heads(dkh), _merge_heads(dvh)
        g["w_q"] = np.einsum("bsi,bsj->ij", cache.i, dq)
        g["w_k"] = np.einsum("bsi,bsj->ij", cache.t, dk)
        g["w_v"] = np.einsum("bsi,bsj->ij", cache.t, dv)
        di = dq @ params.w_q.T
        dt = dk @ params.w_k.T + dv @ params.w_v.T

    g["text_proj"] = np.einsum("bsi,bsj->ij", cache.xt, dt)
    g["text_bias"] = dt.sum(axis=(0, 1))
    g["img_token_proj"] = np.einsum("bsd,btd->st", di, cache.ie)
    die = np.einsum("st,bsd->btd", params.img_token_proj, di)
    g["img_embed_proj"] = np.einsum("bti,btj->ij", cache.xi, die)
    g["img_embed_bias"] = die.sum(axis=(0, 1))
    return g


def loss_and_grads(
    text: np.ndarray, image: np.ndarray, y: np.ndarray, params: ModelParams, bypass_attention: bool = False
) -> tuple[float, dict[str, np.ndarray]]:
    probs, cache = forward(text, image, params, bypass_attention)
    return batch_loss(probs, y), backward(cache, y, params, bypass_attention)


# ---------------------------------------------------------------------------
# training


@dataclass(frozen=True)
class TrainConfig:
    batch_size: int = 16
    epochs: int = 25
    lr: float = 0.05
    optimizer: str = "sgd"      # "sgd", "momentum" or "adam"
    momentum: float = 0.9
    seed: int = 0
    threshold: float = 0.5
    d: int = 32
    n_heads: int = 2

    def __post_init__(self) -> None:
        if self.batch_size < 1:
            raise ValueError("batch_size must be >= 1")
        if self.epochs < 1:
            raise ValueError("epochs must be >= 1")
        if not 0.0 < self.threshold < 1.0:
            raise ValueError("threshold must lie in (0, 1)")
        if self.optimizer not in ("sgd", "momentum", "adam"):
            raise ValueError(f"unknown optimizer {self.optimizer!r}")
        if self.d % self.n_heads:
            raise ValueError("d must be divisible by n_heads")


@dataclass
class TrainResult:
    params: ModelParams
    epoch_losses: list[float]
    initial_loss: float
    final_loss: float
    trajectory: list[float] = field(default_factory=list)  # per-step batch losses


class _Optimizer:
    def __init__(self, cfg: TrainConfig, params: ModelParams):
        self.cfg = cfg
        self.state = {k: np.zeros_like(v) for k, v in params.arrays().items()}
        self.state2 = {k: np.zeros_like(v) for k, v in params.arrays().items()}
        self.t = 0

    def step(self, params: ModelParams, grads: dict[str, np.ndarray]) -> None:
        cfg = self.cfg
        self.t += 1
        for name in PARAM_NAMES:
            p, g = getattr(params, name), grads[name]
            if cfg.optimizer == "sgd":
                p -= cfg.lr * g
            elif cfg.optimizer == "momentum":
                v = self.state[name]
                v *= cfg.momentum
                v += g
                p -= cfg.lr * v
            else:
                m, v = self.state[name], self.state2[name]
                m *= 0.9
                m += 0.1 * g
                v *= 0.999
                v += 0.001 * g * g
                mhat = m / (1 - 0.9 ** self.t)
                vhat = v / (1 - 0.999 ** self.t)
                p -= cfg.lr * mhat / (np.sqrt(vhat) + 1e-8)


Sample = tuple[np.ndarray, np.ndarray, np.ndarray]


def stack_dataset(dataset: Sequence[Sample]) -> tuple[np.ndarray, np.ndarray, np.ndarray]:
    if not dataset:
        raise ValueError("empty dataset")
    shapes = {(np.shape(t), np.shape(i), np.shape(y)) for t, i, y in dataset}
    if len(shapes) != 1:
        raise ShapeError(f"inconsistent sample shapes: {sorted(shapes)[:3]}")
    xt = np.stack([np.asarray(t, dtype=np.float64) for t, _, _ in dataset])
    xi = np.stack([np.asarray(i, dtype=np.float64) for _, i, _ in dataset])
    y = np.stack([np.asarray(l, dtype=np.float64) for _, _, l in dataset])
    if not (np.all(np.isfinite(xt)) and np.all(np.isfinite(xi))):
        raise ValueError("embeddings contain non-finite values")
    if not np.all((y == 0) | (y == 1)):
        raise ValueError("label vectors must be binary")
    return xt, xi, y


def train(dataset: Sequence[Sample], cfg: TrainConfig, params: ModelParams | None = None) -> TrainResult:
    """Minibatch training on (text embedding, image embedding, label vector) triples."""
    xt, xi, y = stack_dataset(dataset)
    rng = np.random.default_rng(cfg.seed)
    if params is None:
        params = init_params(
            text_dim=xt.shape[2], image_dim=xi.shape[2], seq_len=xt.shape[1],
            image_tokens=xi.shape[1], d=cfg.d, n_heads=cfg.n_heads,
            n_classes=y.shape[1], rng=rng,
        )
    else:
        params = params.copy()
    opt = _Optimizer(cfg, params)
    initial = evaluate_loss(xt, xi, y, params)
    n = len(xt)
    epoch_losses: list[float] = []
    trajectory: list[float] = []
    for epoch in range(cfg.epochs):
        order = rng.permutation(n)
        total = 0.0
        for start in range(0, n, cfg.batch_size):
            idx = order[start:start + cfg.batch_size]
            loss, grads = loss_and_grads(xt[idx], xi[idx], y[idx], params)
            if not np.isfinite(loss):
                norms = {k: float(np.linalg.norm(v)) for k, v in params.arrays().items()}
                raise TrainingError(
                    f"non-finite loss at epoch {epoch} batch {start // cfg.batch_size}; "
                    f"parameter norms {norms}"
                )
            opt.step(params, grads)
            trajectory.append(loss)
            total += loss * len(idx)
        epoch_losses.append(total / n)
        log.debug("epoch %d loss %.6f", epoch + 1, epoch_losses[-1])
    final = evaluate_loss(xt, xi, y, params)
    return TrainResult(params, epoch_losses, initial, final, trajectory)


def evaluate_loss(xt: np.ndarray, xi: np.ndarray, y: np.ndarray, params: ModelParams) -> float:
    probs, _ = forward(xt, xi, params)
    return batch_loss(probs, y)


def predict_proba(text: np.ndarray, image: np.ndarray, params: ModelParams) -> np.ndarray:
    """Class probabilities clamped into [EPS, 1 - EPS], the range the loss sees.

    Without the clamp a saturated sigmoid returns exactly 1.0 in float64 and no
    threshold below one could ever reject it.
    """
    probs, _ = forward(text, image, params)
    probs = np.clip(probs, EPS, 1.0 - EPS)
    return probs[0] if np.ndim(text) == 2 else probs


def predict(
    text: np.ndarray,
    image: np.ndarray,
    params: ModelParams,
    threshold: float = 0.5,
    labels: Sequence[str] | None = None,
) -> set:
    """Labels (or class indices when ``labels`` is None) with probability >= threshold."""
    probs = predict_proba(text, image, params)
    return labels_from_probs(probs, threshold, labels)


def labels_from_probs(probs: Iterable[float], threshold: float, labels: Sequence[str] | None = None) -> set:
    hits = [c for c, p in enumerate(probs) if p >= threshold]
    return set(hits) if labels is None else {labels[c] for c in hits}


# ---------------------------------------------------------------------------
# finite-difference verification


@dataclass
class GradCheckReport:
    max_rel_error: float
    worst_param: str
    worst_index: tuple[int, ...]
    n_checked: int
    tol: float

    @property
    def passed(self) -> bool:
        return self.max_rel_error <= self.tol


GradFn = Callable[[np.ndarray, np.ndarray, np.ndarray, ModelParams, bool], tuple[float, dict]]


def gradient_check(
    params: ModelParams,
    sample: Sample,
    h: float = 1e-4,
    tol: float = 1e-4,
    bypass_attention: bool = False,
    grad_fn: GradFn = loss_and_grads,
    floor: float = 1e-8,
) -> GradCheckReport:
    """Central differences against ``grad_fn`` for every trainable scalar.

    The relative error of a scalar is |a - n| / max(|a|, |n|, floor); the
    floor stops gradients that are zero up to rounding from dominating.
    """
    text, image, y = sample
    params = params.copy()
    _, analytic = grad_fn(text, image, y, params, bypass_attention)
    worst = (0.0, "", ())
    count = 0
    for name, arr in params.arrays().items():
        for idx in np.ndindex(arr.shape):
            orig = arr[idx]
            arr[idx] = orig + h
            lp = batch_loss(forward(text, image, params, bypass_attention)[0], y)
            arr[idx] = orig - h
            lm = batch_loss(forward(text, image, params, bypass_attention)[0], y)
            arr[idx] = orig
            numeric = (lp - lm) / (2.0 * h)
            a = analytic[name][idx]
            err = abs(a - numeric) / max(abs(a), abs(numeric), floor)
            count += 1
            if err > worst[0]:
                worst = (err, name, idx)
    return GradCheckReport(worst[0], worst[1], tuple(int(i) for i in worst[2]), count, tol)
