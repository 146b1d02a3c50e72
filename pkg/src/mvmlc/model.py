"""Masked multi-view transformer classifier with class-token heads.

Pipeline: per-view MLPs embed heterogeneous views into a shared width, a
view-attention encoder exchanges information across available views only
(missing views are masked out of every softmax), an adaptive weighting fuses
the per-view states into one vector per sample, and a second encoder runs
over [fused vector, c learnable class tokens] so categories can share
information. c+1 sigmoid heads read the outputs: one multi-label head on the
consensus token and one scalar head per class token.

Masking guarantee: the features, embeddings, and encoder states of a view
with availability 0 never influence any available view's state, the fused
vector, or any prediction. Masked attention weights underflow to exactly 0,
so the guarantee is bit-exact, not approximate.

Encoder blocks use pre-layer-norm residual wiring. Every MLP block is
linear -> GELU -> dropout -> linear -> dropout with hidden width equal to
the embedding width.
"""

from __future__ import annotations

import json
import math
from dataclasses import asdict, dataclass

import numpy as np

from . import autodiff as ad
from .autodiff import Tensor
from .errors import DimensionMismatch, EmptyRowMask

LAYER_NORM_EPS = 1e-5

CHECKPOINT_FORMAT = "mvmlc-checkpoint"
CHECKPOINT_VERSION = 1


@dataclass
class ModelConfig:
    """Architecture hyperparameters.

    d_e: embedding width; heads: attention head count (must divide d_e);
    layers_v / layers_c: depth of the view and class-token encoders;
    dropout: rate used after attention output projections and inside MLP
    blocks; gamma: exponent of the fusion weights exp(a**gamma); dtype:
    "float32" for training, "float64" for verification.
    """

    d_e: int = 128
    heads: int = 4
    layers_v: int = 1
    layers_c: int = 1
    dropout: float = 0.1
    gamma: float = 2.0
    dtype: str = "float32"

    def __post_init__(self):
        if self.d_e < 1 or self.heads < 1 or self.d_e % self.heads != 0:
            raise ValueError(f"d_e={self.d_e} must be a positive multiple of heads={self.heads}")
        if self.layers_v < 1 or self.layers_c < 1:
            raise ValueError("encoder depths must be >= 1")
        if not 0.0 <= self.dropout < 1.0:
            raise ValueError(f"dropout must be in [0, 1), got {self.dropout}")
        if self.gamma <= 0:
            raise ValueError(f"gamma must be positive, got {self.gamma}")
        if self.dtype not in ("float32", "float64"):
            raise ValueError(f"dtype must be float32 or float64, got {self.dtype}")

    @property
    def d_h(self) -> int:
        return self.d_e // self.heads

    @property
    def np_dtype(self):
        return np.float32 if self.dtype == "float32" else np.float64


_ENCODER_SUFFIXES = (
    "wq", "wk", "wv", "wo", "bo",
    "ln1_g", "ln1_b", "ln2_g", "ln2_b",
    "mlp_w1", "mlp_b1", "mlp_w2", "mlp_b2",
)


class ModelParams:
    """Name-addressed store of all learnable tensors plus the shapes metadata
    (config, per-view input dims, label count) needed to rebuild the model."""

    def __init__(self, config: ModelConfig, view_dims: list[int], n_labels: int,
                 tensors: dict[str, Tensor]):
        self.config = config
        self.view_dims = list(view_dims)
        self.n_labels = int(n_labels)
        self._tensors = tensors

    @classmethod
    def initialize(cls, config: ModelConfig, view_dims: list[int], n_labels: int,
                   seed: int = 0) -> "ModelParams":
        """Seeded init: weights N(0, 0.02), biases 0, norm gains 1, fusion
        weights 1 (so fusion starts as a masked mean), class tokens N(0, 0.02)."""
        rng = np.random.default_rng(seed)
        dt = config.np_dtype
        d = config.d_e
        t: dict[str, Tensor] = {}

        def weight(shape):
            return Tensor((rng.standard_normal(shape) * 0.02).astype(dt), requires_grad=True)

        def zeros(shape):
            return Tensor(np.zeros(shape, dtype=dt), requires_grad=True)

        def ones(shape):
            return Tensor(np.ones(shape, dtype=dt), requires_grad=True)

        for v, d_v in enumerate(view_dims):
            t[f"embed.{v}.w1"] = weight((d_v, d))
            t[f"embed.{v}.b1"] = zeros(d)
            t[f"embed.{v}.w2"] = weight((d, d))
            t[f"embed.{v}.b2"] = zeros(d)

        def encoder_layer(prefix):
            t[f"{prefix}.wq"] = weight((d, d))
            t[f"{prefix}.wk"] = weight((d, d))
            t[f"{prefix}.wv"] = weight((d, d))
            t[f"{prefix}.wo"] = weight((d, d))
            t[f"{prefix}.bo"] = zeros(d)
            t[f"{prefix}.ln1_g"] = ones(d)
            t[f"{prefix}.ln1_b"] = zeros(d)
            t[f"{prefix}.ln2_g"] = ones(d)
            t[f"{prefix}.ln2_b"] = zeros(d)
            t[f"{prefix}.mlp_w1"] = weight((d, d))
            t[f"{prefix}.mlp_b1"] = zeros(d)
            t[f"{prefix}.mlp_w2"] = weight((d, d))
            t[f"{prefix}.mlp_b2"] = zeros(d)

        for layer in range(config.layers_v):
            encoder_layer(f"view_enc.{layer}")
        t["fusion.a"] = ones(len(view_dims))
        t["cls"] = weight((n_labels, d))
        for layer in range(config.layers_c):
            encoder_layer(f"cls_enc.{layer}")
        t["head_main.w"] = weight((d, n_labels))
        t["head_main.b"] = zeros(n_labels)
        t["head_tokens.w"] = weight((n_labels, d))
        t["head_tokens.b"] = zeros(n_labels)
        return cls(config, view_dims, n_labels, t)

    def __getitem__(self, name: str) -> Tensor:
        return self._tensors[name]

    def __contains__(self, name: str) -> bool:
        return name in self._tensors

    def names(self) -> list[str]:
        return list(self._tensors)

    def items(self):
        return self._tensors.items()

    def tensors(self) -> list[Tensor]:
        return list(self._tensors.values())

    def num_parameters(self) -> int:
        return sum(t.size for t in self._tensors.values())

    def zero_grads(self):
        for t in self._tensors.values():
            t.grad = None

    def all_finite(self) -> bool:
        return all(np.isfinite(t.data).all() for t in self._tensors.values())

    def groups(self) -> dict[str, list[str]]:
        """Parameter names keyed by functional group, for diagnostics."""
        out: dict[str, list[str]] = {
            "embed": [], "view_attention": [], "fusion": [],
            "class_tokens": [], "class_attention": [], "heads": [],
        }
        for name in self._tensors:
            if name.startswith("embed."):
                out["embed"].append(name)
            elif name.startswith("view_enc."):
                out["view_attention"].append(name)
            elif name == "fusion.a":
                out["fusion"].append(name)
            elif name == "cls":
                out["class_tokens"].append(name)
            elif name.startswith("cls_enc."):
                out["class_attention"].append(name)
            else:
                out["heads"].append(name)
        return out


# ---------------------------------------------------------------------------
# forward pieces
# ---------------------------------------------------------------------------


def _mlp_block(x: Tensor, params: ModelParams, prefix: str, train: bool, rng) -> Tensor:
    cfg = params.config
    h = ad.gelu(ad.matmul(x, params[f"{prefix}w1"]) + params[f"{prefix}b1"])
    h = ad.dropout(h, cfg.dropout, rng=rng, train=train)
    h = ad.matmul(h, params[f"{prefix}w2"]) + params[f"{prefix}b2"]
    return ad.dropout(h, cfg.dropout, rng=rng, train=train)


def embed_views(views, params: ModelParams, train: bool = False, rng=None) -> Tensor:
    """Map per-view matrices (n x d_v each) into a shared (n, m, d_e) tensor."""
    if len(views) != len(params.view_dims):
        raise DimensionMismatch(f"got {len(views)} views for a {len(params.view_dims)}-view model")
    dt = params.config.np_dtype
    embedded = []
    for v, x in enumerate(views):
        x = np.asarray(x.data if isinstance(x, Tensor) else x, dtype=dt)
        if x.ndim != 2 or x.shape[1] != params.view_dims[v]:
            raise DimensionMismatch(
                f"view {v} has shape {x.shape}; expected (n, {params.view_dims[v]})"
            )
        embedded.append(_mlp_block(Tensor(x), params, f"embed.{v}.", train, rng))
    return ad.stack(embedded, axis=1)


def attention_mask(view_mask: np.ndarray) -> np.ndarray:
    """Pairwise availability mask (n, m, m): outer product of each sample's
    availability row. Rows belonging to missing views would be entirely
    masked (nothing to attend to), so their diagonal is re-enabled; their
    output is self-content only and is never read downstream."""
    w = np.asarray(view_mask)
    if np.any(w.sum(axis=-1) == 0):
        raise EmptyRowMask("a sample has no available view")
    mask = w[:, :, None] * w[:, None, :]
    rows, cols = np.nonzero(w == 0)
    mask[rows, cols, cols] = 1.0
    return mask


def masked_attention(x: Tensor, mask, params: ModelParams, prefix: str):
    """Multi-head scaled dot-product attention over the token axis.

    x: (n, t, d_e); mask: (n, t, t) binary or None for unmasked attention.
    Returns (mixed, probs) where mixed is the concatenated head outputs
    (n, t, d_e) before the output projection and probs is (n, h, t, t).
    """
    cfg = params.config
    n, t, _ = x.shape

    def heads(weight_name):
        proj = ad.matmul(x, params[f"{prefix}.{weight_name}"])
        return ad.transpose(proj.reshape((n, t, cfg.heads, cfg.d_h)), (0, 2, 1, 3))

    q, k, v = heads("wq"), heads("wk"), heads("wv")
    scores = ad.matmul(q, ad.transpose(k, (0, 1, 3, 2))) * (1.0 / math.sqrt(cfg.d_h))
    if mask is None:
        probs = ad.softmax(scores)
    else:
        probs = ad.masked_softmax(scores, np.asarray(mask)[:, None, :, :])
    mixed = ad.matmul(probs, v)
    mixed = ad.transpose(mixed, (0, 2, 1, 3)).reshape((n, t, cfg.d_e))
    return mixed, probs


def _encoder_layer(x: Tensor, mask, params: ModelParams, prefix: str,
                   train: bool, rng) -> Tensor:
    cfg = params.config
    normed = ad.layer_norm(x, params[f"{prefix}.ln1_g"], params[f"{prefix}.ln1_b"],
                           eps=LAYER_NORM_EPS)
    mixed, _ = masked_attention(normed, mask, params, prefix)
    attended = ad.matmul(mixed, params[f"{prefix}.wo"]) + params[f"{prefix}.bo"]
    x = x + ad.dropout(attended, cfg.dropout, rng=rng, train=train)
    normed = ad.layer_norm(x, params[f"{prefix}.ln2_g"], params[f"{prefix}.ln2_b"],
                           eps=LAYER_NORM_EPS)
    return x + _mlp_block(normed, params, f"{prefix}.mlp_", train, rng)


def masked_self_attention(x, view_mask, params: ModelParams, layer: int = 0,
                          train: bool = False, rng=None) -> Tensor:
    """One masked encoder layer. Accepts a single sample (m, d_e) with its
    availability row (m,), or a batch (n, m, d_e) with rows (n, m)."""
    x = x if isinstance(x, Tensor) else Tensor(np.asarray(x, dtype=params.config.np_dtype))
    single = x.ndim == 2
    w = np.atleast_2d(np.asarray(view_mask))
    if single:
        x = x.reshape((1,) + tuple(x.shape))
    out = _encoder_layer(x, attention_mask(w), params, f"view_enc.{layer}", train, rng)
    return out[0] if single else out


def view_encoder_forward(embedded: Tensor, view_mask, params: ModelParams,
                         train: bool = False, rng=None) -> Tensor:
    """Run all masked encoder layers over the (n, m, d_e) view embeddings."""
    mask = attention_mask(view_mask)
    x = embedded
    for layer in range(params.config.layers_v):
        x = _encoder_layer(x, mask, params, f"view_enc.{layer}", train, rng)
    return x


def adaptive_fusion(states: Tensor, view_mask, weights: Tensor, gamma: float) -> Tensor:
    """Fuse per-view states (n, m, d_e) into (n, d_e).

    Each available view v gets weight exp(weights[v]**gamma), renormalized
    over that sample's available views; missing views get weight 0. The
    weight vector is learnable and receives gradient through the fusion.
    """
    w = np.asarray(view_mask, dtype=states.dtype)
    if np.any(w.sum(axis=-1) == 0):
        raise EmptyRowMask("a sample has no available view to fuse")
    n, m, _ = states.shape
    raw = ad.exp(weights ** gamma)
    numer = (states * raw.reshape((1, m, 1)) * Tensor(w[:, :, None])).sum(axis=1)
    denom = (raw.reshape((1, m)) * Tensor(w)).sum(axis=1, keepdims=True)
    return numer / denom


def fusion_weights(params: ModelParams) -> np.ndarray:
    """Current unnormalized fusion weights exp(a**gamma) as plain floats."""
    a = params["fusion.a"].data
    return np.exp(np.power(a, params.config.gamma))


def class_token_encoder_forward(fused: Tensor, params: ModelParams,
                                train: bool = False, rng=None):
    """Unmasked encoder over [fused sample vector, c class tokens].

    Returns (consensus, class_states): the first output token (n, d_e) and
    the per-sample class-token states (n, c, d_e). The same learned tokens
    feed every sample; attention specializes them per sample.
    """
    cfg = params.config
    n = fused.shape[0]
    c = params.n_labels
    if fused.ndim != 2 or fused.shape[1] != cfg.d_e:
        raise DimensionMismatch(f"fused states have shape {fused.shape}; expected (n, {cfg.d_e})")
    tokens = ad.concat(
        [fused.reshape((n, 1, cfg.d_e)),
         ad.broadcast_to(params["cls"].reshape((1, c, cfg.d_e)), (n, c, cfg.d_e))],
        axis=1,
    )
    for layer in range(cfg.layers_c):
        tokens = _encoder_layer(tokens, None, params, f"cls_enc.{layer}", train, rng)
    return tokens[:, 0, :], tokens[:, 1:, :]


def predict(consensus: Tensor, class_states: Tensor, params: ModelParams):
    """Sigmoid probabilities from the c+1 heads.

    p_main (n, c) comes from the shared head on the consensus token and is
    what inference and metrics use; p_tokens (n, c) stacks the c per-class
    scalar heads, each reading only its own token.
    """
    c = params.n_labels
    d = params.config.d_e
    p_main = ad.sigmoid(ad.matmul(consensus, params["head_main.w"]) + params["head_main.b"])
    token_logits = (class_states * params["head_tokens.w"].reshape((1, c, d))).sum(axis=2)
    p_tokens = ad.sigmoid(token_logits + params["head_tokens.b"])
    return p_main, p_tokens


@dataclass
class ForwardPass:
    """All intermediate and final tensors of one forward evaluation."""

    view_states: Tensor      # (n, m, d_e) encoder output per view
    fused: Tensor            # (n, d_e) weighted fusion
    consensus: Tensor        # (n, d_e) first token of the class encoder
    class_states: Tensor     # (n, c, d_e) specialized class tokens
    p_main: Tensor           # (n, c) main predictions
    p_tokens: Tensor         # (n, c) per-class-token predictions


def forward(views, view_mask, params: ModelParams, train: bool = False, rng=None) -> ForwardPass:
    embedded = embed_views(views, params, train=train, rng=rng)
    view_states = view_encoder_forward(embedded, view_mask, params, train=train, rng=rng)
    fused = adaptive_fusion(view_states, view_mask, params["fusion.a"], params.config.gamma)
    consensus, class_states = class_token_encoder_forward(fused, params, train=train, rng=rng)
    p_main, p_tokens = predict(consensus, class_states, params)
    return ForwardPass(view_states, fused, consensus, class_states, p_main, p_tokens)


# ---------------------------------------------------------------------------
# checkpointing
# ---------------------------------------------------------------------------


def save_checkpoint(params: ModelParams, path) -> None:
    """Single-file checkpoint: versioned JSON header + named parameter blobs.

    Arrays are stored losslessly, so save -> load round-trips bit-exactly.
    """
    meta = {
        "format": CHECKPOINT_FORMAT,
        "version": CHECKPOINT_VERSION,
        "config": asdict(params.config),
        "view_dims": params.view_dims,
        "n_labels": params.n_labels,
        "names": params.names(),
    }
    arrays = {f"param:{name}": t.data for name, t in params.items()}
    with open(path, "wb") as fh:
        np.savez(fh, __meta__=np.frombuffer(json.dumps(meta).encode("utf-8"), dtype=np.uint8),
                 **arrays)


def load_checkpoint(path) -> ModelParams:
    with np.load(path) as bundle:
        meta = json.loads(bundle["__meta__"].tobytes().decode("utf-8"))
        if meta.get("format") != CHECKPOINT_FORMAT:
            raise ValueError(f"{path} is not a {CHECKPOINT_FORMAT} file")
        if meta.get("version") != CHECKPOINT_VERSION:
            raise ValueError(f"unsupported checkpoint version {meta.get('version')}")
        config = ModelConfig(**meta["config"])
        tensors = {
            name: Tensor(bundle[f"param:{name}"].copy(), requires_grad=True)
            for name in meta["names"]
        }
    return ModelParams(config, meta["view_dims"], meta["n_labels"], tensors)
