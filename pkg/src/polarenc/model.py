"""Layout-biased transformer encoder.

Input embeddings sum a token table and an absolute 1D-position table (plus,
only for the ablation, four absolute 2D coordinate tables). Bounding boxes
otherwise enter the network exclusively through pairwise (distance, angle)
bins that bias the pre-softmax attention scores.

Attention role convention: for the output at position i, token i supplies
the key and every context token j supplies a query, so the unnormalized
score is q_j . k_i plus the bias terms q_j . E_dist(bin) + q_j . E_angle(bin),
all scaled by 1/sqrt(d_head). A `standard_qk` switch flips to the common
q_i . k_j convention for comparison.
"""

from __future__ import annotations

import hashlib
import math
from dataclasses import dataclass, field, fields, replace
from typing import Optional

import numpy as np

from . import tensor as T
from .geometry import BinningConfig, CartesianBins, RelativeBins
from .tensor import Tensor

BIAS_MODES = ("polar", "cartesian", "none")
GELU_MODES = ("exact", "tanh")


@dataclass(frozen=True)
class ModelConfig:
    vocab_size: int
    n_layers: int = 2
    n_heads: int = 4
    d_model: int = 64
    d_ff: int = 128
    max_seq_len: int = 128
    binning: BinningConfig = field(default_factory=BinningConfig)
    use_abs_2d: bool = False
    bias_mode: str = "polar"
    dropout: float = 0.0
    gelu_mode: str = "exact"
    standard_qk: bool = False
    ln_eps: float = 1e-12
    init_std: float = 0.1

    def __post_init__(self) -> None:
        if self.d_model % self.n_heads != 0:
            raise ValueError(f"d_model {self.d_model} not divisible by n_heads {self.n_heads}")
        if self.bias_mode not in BIAS_MODES:
            raise ValueError(f"bias_mode must be one of {BIAS_MODES}, got {self.bias_mode!r}")
        if self.gelu_mode not in GELU_MODES:
            raise ValueError(f"gelu_mode must be one of {GELU_MODES}, got {self.gelu_mode!r}")
        if not 0.0 <= self.dropout < 1.0:
            raise ValueError(f"dropout must be in [0, 1), got {self.dropout}")

    @property
    def d_head(self) -> int:
        return self.d_model // self.n_heads

    @property
    def masked_pos_index(self) -> int:
        """Extra row of the 1D-position table used when a position is hidden."""
        return self.max_seq_len


def desk_config(vocab_size: int, **overrides) -> ModelConfig:
    """Small preset that trains on one CPU core in minutes."""
    return replace(ModelConfig(vocab_size=vocab_size), **overrides) if overrides else ModelConfig(vocab_size=vocab_size)


def paper_config(vocab_size: int = 50265, **overrides) -> ModelConfig:
    """Full-size preset: 12 layers, 12 heads, width 768."""
    cfg = ModelConfig(
        vocab_size=vocab_size,
        n_layers=12,
        n_heads=12,
        d_model=768,
        d_ff=3072,
        max_seq_len=512,
        dropout=0.1,
        init_std=0.02,
    )
    return replace(cfg, **overrides) if overrides else cfg


_CONFIG_SCALARS = ("vocab_size", "n_layers", "n_heads", "d_model", "d_ff", "max_seq_len",
                   "use_abs_2d", "bias_mode", "dropout", "gelu_mode", "standard_qk", "ln_eps", "init_std")
_BINNING_SCALARS = ("rho_max", "n_dist_bins", "n_angle_bins")


def config_to_text(cfg: ModelConfig) -> str:
    """Flat `key = value` serialization; the hash of this text identifies a run."""
    lines = []
    for name in _CONFIG_SCALARS:
        lines.append(f"{name} = {getattr(cfg, name)}")
    for name in _BINNING_SCALARS:
        lines.append(f"{name} = {getattr(cfg.binning, name)}")
    return "\n".join(lines) + "\n"


def config_from_text(text: str) -> ModelConfig:
    raw: dict[str, str] = {}
    for lineno, line in enumerate(text.splitlines(), 1):
        line = line.strip()
        if not line or line.startswith("#"):
            continue
        if "=" not in line:
            raise ValueError(f"config line {lineno} is not `key = value`: {line!r}")
        key, _, value = line.partition("=")
        raw[key.strip()] = value.strip()

    def coerce(value: str, typ):
        if typ is bool:
            return value.lower() in ("true", "1", "yes")
        return typ(value)

    binning_types = {f.name: f.type for f in fields(BinningConfig)}
    bin_kwargs = {
        name: coerce(raw.pop(name), {"float": float, "int": int}[binning_types[name]])
        for name in _BINNING_SCALARS
        if name in raw
    }
    cfg_types = {f.name: f.type for f in fields(ModelConfig)}
    pytypes = {"int": int, "float": float, "bool": bool, "str": str}
    kwargs = {}
    for name in _CONFIG_SCALARS:
        if name in raw:
            kwargs[name] = coerce(raw.pop(name), pytypes[cfg_types[name]])
    if raw:
        raise ValueError(f"unknown config keys: {sorted(raw)}")
    return ModelConfig(binning=BinningConfig(**bin_kwargs), **kwargs)


def config_hash(cfg: ModelConfig) -> str:
    return hashlib.sha256(config_to_text(cfg).encode()).hexdigest()[:16]


class ParameterStore:
    """Named learned tensors; names are stable and used for checkpoints."""

    def __init__(self, params: Optional[dict[str, Tensor]] = None):
        self._params: dict[str, Tensor] = dict(params or {})

    def __getitem__(self, name: str) -> Tensor:
        return self._params[name]

    def __setitem__(self, name: str, t: Tensor) -> None:
        self._params[name] = t

    def __contains__(self, name: str) -> bool:
        return name in self._params

    def __len__(self) -> int:
        return len(self._params)

    def names(self) -> list[str]:
        return sorted(self._params)

    def items(self):
        return ((n, self._params[n]) for n in self.names())

    def as_arrays(self) -> dict[str, np.ndarray]:
        return {n: t.values for n, t in self.items()}

    def total_size(self) -> int:
        return sum(t.size for t in self._params.values())

    def zero_grads(self) -> None:
        for t in self._params.values():
            t.grad = None

    def clone(self) -> "ParameterStore":
        return ParameterStore({n: Tensor(t.values.copy(), requires_grad=True) for n, t in self._params.items()})


N_COORD_ROWS = 1001  # discrete coordinate values 0..1000


def init_params(cfg: ModelConfig, seed: int) -> ParameterStore:
    rng = T.make_rng(seed, "init")
    store = ParameterStore()

    def param(name: str, *shape: int, kind: str = "normal") -> None:
        if kind == "normal":
            v = rng.normal(0.0, cfg.init_std, shape)
        elif kind == "zeros":
            v = np.zeros(shape)
        elif kind == "ones":
            v = np.ones(shape)
        else:
            raise ValueError(kind)
        store[name] = Tensor(v, requires_grad=True)

    d, dh = cfg.d_model, cfg.d_head
    param("embed.tok", cfg.vocab_size, d)
    param("embed.pos1d", cfg.max_seq_len + 1, d)
    param("embed.ln_g", d, kind="ones")
    param("embed.ln_b", d, kind="zeros")
    if cfg.use_abs_2d:
        for coord in ("x0", "y0", "x1", "y1"):
            param(f"embed.abs2d.{coord}", N_COORD_ROWS, d)
    for i in range(cfg.n_layers):
        p = f"layer{i}"
        for w in ("wq", "wk", "wv", "wo"):
            param(f"{p}.attn.{w}", d, d)
            param(f"{p}.attn.{w[1]}b", d, kind="zeros")
        if cfg.bias_mode == "polar":
            param(f"{p}.attn.dist", cfg.binning.n_dist_bins, dh)
            param(f"{p}.attn.angle", cfg.binning.n_angle_bins, dh)
        elif cfg.bias_mode == "cartesian":
            param(f"{p}.attn.cart_x", 2 * cfg.binning.n_dist_bins, dh)
            param(f"{p}.attn.cart_y", 2 * cfg.binning.n_dist_bins, dh)
        param(f"{p}.ln1_g", d, kind="ones")
        param(f"{p}.ln1_b", d, kind="zeros")
        param(f"{p}.ffn.w1", d, cfg.d_ff)
        param(f"{p}.ffn.b1", cfg.d_ff, kind="zeros")
        param(f"{p}.ffn.w2", cfg.d_ff, d)
        param(f"{p}.ffn.b2", d, kind="zeros")
        param(f"{p}.ln2_g", d, kind="ones")
        param(f"{p}.ln2_b", d, kind="zeros")
    param("mlm.w", d, d)
    param("mlm.b", d, kind="zeros")
    param("mlm.ln_g", d, kind="ones")
    param("mlm.ln_b", d, kind="zeros")
    param("mlm.out_b", cfg.vocab_size, kind="zeros")
    param("lop.w", d, cfg.max_seq_len)
    param("lop.b", cfg.max_seq_len, kind="zeros")
    return store


def add_ner_params(store: ParameterStore, cfg: ModelConfig, n_labels: int, seed: int) -> None:
    rng = T.make_rng(seed, "ner_init")
    store["ner.w"] = Tensor(rng.normal(0.0, cfg.init_std, (cfg.d_model, n_labels)), requires_grad=True)
    store["ner.b"] = Tensor(np.zeros(n_labels), requires_grad=True)


def count_parameters(cfg: ModelConfig) -> int:
    """Exact learned-scalar count of the pre-training model for a config."""
    d, dh, dff = cfg.d_model, cfg.d_head, cfg.d_ff
    n = cfg.vocab_size * d  # token table
    n += (cfg.max_seq_len + 1) * d  # 1D positions + hidden-position row
    n += 2 * d  # embedding layer norm
    if cfg.use_abs_2d:
        n += 4 * N_COORD_ROWS * d
    per_layer = 4 * (d * d + d)  # q/k/v/o projections with biases
    per_layer += d * dff + dff + dff * d + d  # feed-forward
    per_layer += 4 * d  # two layer norms
    if cfg.bias_mode == "polar":
        per_layer += (cfg.binning.n_dist_bins + cfg.binning.n_angle_bins) * dh
    elif cfg.bias_mode == "cartesian":
        per_layer += 4 * cfg.binning.n_dist_bins * dh
    n += cfg.n_layers * per_layer
    n += d * d + d + 2 * d + cfg.vocab_size  # mlm transform + norm + tied-output bias
    n += d * cfg.max_seq_len + cfg.max_seq_len  # position-recovery head
    return n


@dataclass
class LayerParams:
    """View of one encoder layer's tensors inside a ParameterStore."""

    wq: Tensor
    qb: Tensor
    wk: Tensor
    kb: Tensor
    wv: Tensor
    vb: Tensor
    wo: Tensor
    ob: Tensor
    ln1_g: Tensor
    ln1_b: Tensor
    ffn_w1: Tensor
    ffn_b1: Tensor
    ffn_w2: Tensor
    ffn_b2: Tensor
    ln2_g: Tensor
    ln2_b: Tensor
    dist: Optional[Tensor] = None
    angle: Optional[Tensor] = None
    cart_x: Optional[Tensor] = None
    cart_y: Optional[Tensor] = None


def layer_params(store: ParameterStore, i: int) -> LayerParams:
    p = f"layer{i}"
    return LayerParams(
        wq=store[f"{p}.attn.wq"], qb=store[f"{p}.attn.qb"],
        wk=store[f"{p}.attn.wk"], kb=store[f"{p}.attn.kb"],
        wv=store[f"{p}.attn.wv"], vb=store[f"{p}.attn.vb"],
        wo=store[f"{p}.attn.wo"], ob=store[f"{p}.attn.ob"],
        ln1_g=store[f"{p}.ln1_g"], ln1_b=store[f"{p}.ln1_b"],
        ffn_w1=store[f"{p}.ffn.w1"], ffn_b1=store[f"{p}.ffn.b1"],
        ffn_w2=store[f"{p}.ffn.w2"], ffn_b2=store[f"{p}.ffn.b2"],
        ln2_g=store[f"{p}.ln2_g"], ln2_b=store[f"{p}.ln2_b"],
        dist=store[f"{p}.attn.dist"] if f"{p}.attn.dist" in store else None,
        angle=store[f"{p}.attn.angle"] if f"{p}.attn.angle" in store else None,
        cart_x=store[f"{p}.attn.cart_x"] if f"{p}.attn.cart_x" in store else None,
        cart_y=store[f"{p}.attn.cart_y"] if f"{p}.attn.cart_y" in store else None,
    )


def _linear(x: Tensor, w: Tensor, b: Tensor) -> Tensor:
    return T.add(T.matmul(x, w), b)


def embed_inputs(
    token_ids: np.ndarray,
    bboxes: np.ndarray,
    cfg: ModelConfig,
    store: ParameterStore,
    pos_ids: Optional[np.ndarray] = None,
    rng: Optional[np.random.Generator] = None,
    train: bool = False,
) -> Tensor:
    """Sum of token and absolute-position embeddings, layer-normed.

    token_ids: int [..., n]; bboxes: int [..., n, 4] normalized coordinates,
    consulted only when use_abs_2d is on. pos_ids default to 0..n-1 and may
    contain cfg.masked_pos_index for hidden positions.
    """
    token_ids = np.asarray(token_ids, dtype=np.int64)
    n = token_ids.shape[-1]
    if n > cfg.max_seq_len:
        raise ValueError(f"sequence length {n} exceeds max_seq_len {cfg.max_seq_len}; pre-truncate")
    if pos_ids is None:
        pos_ids = np.broadcast_to(np.arange(n, dtype=np.int64), token_ids.shape)
    e = T.add(
        T.embedding_lookup(store["embed.tok"], token_ids),
        T.embedding_lookup(store["embed.pos1d"], pos_ids),
    )
    if cfg.use_abs_2d:
        bb = np.asarray(bboxes, dtype=np.int64)
        for k, coord in enumerate(("x0", "y0", "x1", "y1")):
            e = T.add(e, T.embedding_lookup(store[f"embed.abs2d.{coord}"], bb[..., k]))
    e = T.layer_norm(e, store["embed.ln_g"], store["embed.ln_b"], cfg.ln_eps)
    if train and cfg.dropout > 0.0:
        e = T.dropout(e, cfg.dropout, rng)
    return e


def _split_heads(x: Tensor, n_heads: int, d_head: int) -> Tensor:
    b, n, _ = x.shape
    return T.permute(T.reshape(x, (b, n, n_heads, d_head)), (0, 2, 1, 3))


def _merge_heads(x: Tensor) -> Tensor:
    b, h, n, dh = x.shape
    return T.reshape(T.permute(x, (0, 2, 1, 3)), (b, n, h * dh))


def _pair_bias(q4: Tensor, table: Tensor, bins: np.ndarray, n_heads: int, standard_qk: bool) -> Tensor:
    """Per-pair bias grid from a bin-embedding table of shape [n_bins, d_head]."""
    proj = T.matmul(q4, T.transpose(table))  # [B, H, n, n_bins]
    bins4 = np.asarray(bins)[:, None, :, :]  # broadcast over heads
    return T.gather_pairs(proj, bins4, "row" if standard_qk else "col")


def polar_attention(
    h: Tensor,
    bins: RelativeBins | CartesianBins | None,
    pad_mask: np.ndarray,
    layer: LayerParams,
    cfg: ModelConfig,
    rng: Optional[np.random.Generator] = None,
    train: bool = False,
    collect: Optional[dict] = None,
) -> Tensor:
    """Multi-head attention with additive pairwise geometry bias.

    h: [n, d_model] or [B, n, d_model]; bins index matrices [n, n] or
    [B, n, n] matching cfg.bias_mode; pad_mask True at real positions.
    Returns hidden states of the same shape as h.
    """
    squeeze = h.ndim == 2
    if squeeze:
        h = T.reshape(h, (1,) + h.shape)
        if bins is not None:
            bins = type(bins)(*(m[None] for m in bins))
        pad_mask = np.asarray(pad_mask, dtype=bool)[None]
    else:
        pad_mask = np.asarray(pad_mask, dtype=bool)
    b, n, d = h.shape
    if not pad_mask.any(axis=-1).all():
        raise ValueError("attention needs at least one unmasked position per sequence")

    q4 = _split_heads(_linear(h, layer.wq, layer.qb), cfg.n_heads, cfg.d_head)
    k4 = _split_heads(_linear(h, layer.wk, layer.kb), cfg.n_heads, cfg.d_head)
    v4 = _split_heads(_linear(h, layer.wv, layer.vb), cfg.n_heads, cfg.d_head)

    if cfg.standard_qk:
        scores = T.matmul(q4, T.transpose(k4))  # score[i, j] = q_i . k_j
    else:
        scores = T.matmul(k4, T.transpose(q4))  # score[i, j] = q_j . k_i

    bias_terms = []
    if cfg.bias_mode == "polar":
        assert isinstance(bins, RelativeBins)
        bias_terms = [
            _pair_bias(q4, layer.dist, bins.dist, cfg.n_heads, cfg.standard_qk),
            _pair_bias(q4, layer.angle, bins.angle, cfg.n_heads, cfg.standard_qk),
        ]
    elif cfg.bias_mode == "cartesian":
        assert isinstance(bins, CartesianBins)
        bias_terms = [
            _pair_bias(q4, layer.cart_x, bins.dx, cfg.n_heads, cfg.standard_qk),
            _pair_bias(q4, layer.cart_y, bins.dy, cfg.n_heads, cfg.standard_qk),
        ]
    for bt in bias_terms:
        scores = T.add(scores, bt)

    scores = T.mul(scores, Tensor(1.0 / math.sqrt(cfg.d_head)))
    context_mask = pad_mask[:, None, None, :]  # mask context tokens j
    weights = T.masked_softmax(scores, context_mask)

    if collect is not None:
        if bias_terms:
            collect["bias_dist"] = bias_terms[0].values.copy()
            collect["bias_angle"] = bias_terms[1].values.copy()
        else:
            collect["bias_dist"] = np.zeros((b, cfg.n_heads, n, n))
            collect["bias_angle"] = np.zeros((b, cfg.n_heads, n, n))
        collect["weights"] = weights.values.copy()

    if train and cfg.dropout > 0.0:
        weights = T.dropout(weights, cfg.dropout, rng)
    ctx = T.matmul(weights, v4)
    out = _linear(_merge_heads(ctx), layer.wo, layer.ob)
    if squeeze:
        out = T.reshape(out, (n, d))
    return out


def _ffn(h: Tensor, layer: LayerParams, cfg: ModelConfig) -> Tensor:
    inner = T.gelu(_linear(h, layer.ffn_w1, layer.ffn_b1), approx=cfg.gelu_mode == "tanh")
    return _linear(inner, layer.ffn_w2, layer.ffn_b2)


def encoder_forward(
    batch,
    cfg: ModelConfig,
    store: ParameterStore,
    rng: Optional[np.random.Generator] = None,
    train: bool = False,
    collect: Optional[dict] = None,
) -> Tensor:
    """Embed then run the post-norm encoder stack; returns [B, n, d_model].

    `batch` carries token_ids, pos_ids, bboxes, pad_mask and the bin
    matrices matching cfg.bias_mode (see data.Batch).
    """
    h = embed_inputs(batch.token_ids, batch.bboxes, cfg, store,
                     pos_ids=batch.pos_ids, rng=rng, train=train)
    bins = batch.bins_for(cfg.bias_mode)
    for i in range(cfg.n_layers):
        layer = layer_params(store, i)
        layer_collect = {} if collect is not None else None
        a = polar_attention(h, bins, batch.pad_mask, layer, cfg,
                            rng=rng, train=train, collect=layer_collect)
        if collect is not None:
            collect[i] = layer_collect
        if train and cfg.dropout > 0.0:
            a = T.dropout(a, cfg.dropout, rng)
        h = T.layer_norm(T.add(h, a), layer.ln1_g, layer.ln1_b, cfg.ln_eps)
        f = _ffn(h, layer, cfg)
        if train and cfg.dropout > 0.0:
            f = T.dropout(f, cfg.dropout, rng)
        h = T.layer_norm(T.add(h, f), layer.ln2_g, layer.ln2_b, cfg.ln_eps)
    return h


def mlm_head(hidden: Tensor, store: ParameterStore, cfg: ModelConfig) -> Tensor:
    """Token-reconstruction logits; the output projection is tied to the
    token embedding table."""
    t = T.gelu(_linear(hidden, store["mlm.w"], store["mlm.b"]), approx=cfg.gelu_mode == "tanh")
    t = T.layer_norm(t, store["mlm.ln_g"], store["mlm.ln_b"], cfg.ln_eps)
    return T.add(T.matmul(t, T.transpose(store["embed.tok"])), store["mlm.out_b"])


def lop_head(hidden: Tensor, store: ParameterStore) -> Tensor:
    """Logits over absolute sequence indices, for recovering hidden positions."""
    return _linear(hidden, store["lop.w"], store["lop.b"])


def ner_head(
    hidden: Tensor,
    store: ParameterStore,
    cfg: ModelConfig,
    rng: Optional[np.random.Generator] = None,
    train: bool = False,
) -> Tensor:
    if train and cfg.dropout > 0.0:
        hidden = T.dropout(hidden, cfg.dropout, rng)
    return _linear(hidden, store["ner.w"], store["ner.b"])
