"""A small pre-norm decoder transformer with hand-written backpropagation.

Each block has single-head causal self-attention and a GELU feed-forward
network. The four linear layers per block (``att_qkv``, ``att_output``,
``ffn_h_4h``, ``ffn_4h_h``) are the only quantized parameters; embeddings,
layer norms and biases stay in full precision and are frozen. The output head
is tied to the token embedding.

Only the designated alpha planes are trainable (alpha_1 by default).
"""

from __future__ import annotations

import hashlib
import math
from dataclasses import dataclass, field

import numpy as np

from . import bcq
from .bcq import ROW, QuantConfig
from .errors import CacheReuseError, ConfigError, InputError, ShapeError
from .numkit import make_rng
from .qlinear import DenseLinear, QuantLinear

LINEAR_NAMES = ("att_qkv", "att_output", "ffn_h_4h", "ffn_4h_h")
LN_EPS = 1e-5
_GELU_C = math.sqrt(2.0 / math.pi)


@dataclass(frozen=True)
class ModelConfig:
    vocab: int
    h: int
    n_layers: int
    n_ctx: int
    q: int = 3
    g: int = ROW

    def __post_init__(self):
        if self.h < 4 or self.h % 2:
            raise ConfigError(f"hidden size must be even and >= 4, got {self.h}")
        if self.vocab < 2 or self.n_layers < 1 or self.n_ctx < 1:
            raise ConfigError("vocab >= 2, n_layers >= 1 and n_ctx >= 1 are required")

    def layer_shapes(self) -> dict[str, tuple[int, int]]:
        return layer_shapes(self.h)


def layer_shapes(h: int) -> dict[str, tuple[int, int]]:
    """(h_out, h_in) of each quantized layer in a block."""
    return {
        "att_qkv": (3 * h, h),
        "att_output": (h, h),
        "ffn_h_4h": (4 * h, h),
        "ffn_4h_h": (h, 4 * h),
    }


def count_trainable_geometry(h: int, n_layers: int, g: int = ROW, planes=(1,)) -> int:
    """Trainable scale count for a geometry, without building the model."""
    resolve = QuantConfig(q=1, g=g).group_size
    per_plane = sum(h_out * (h_in // resolve(h_in)) for h_out, h_in in layer_shapes(h).values())
    return n_layers * per_plane * len(planes)


@dataclass
class Block:
    att_qkv: QuantLinear | DenseLinear
    att_output: QuantLinear | DenseLinear
    ffn_h_4h: QuantLinear | DenseLinear
    ffn_4h_h: QuantLinear | DenseLinear
    ln1_gain: np.ndarray
    ln1_bias: np.ndarray
    ln2_gain: np.ndarray
    ln2_bias: np.ndarray

    def linears(self):
        return [(name, getattr(self, name)) for name in LINEAR_NAMES]


@dataclass
class ToyTransformer:
    config: ModelConfig
    tok_emb: np.ndarray
    pos_emb: np.ndarray
    blocks: list[Block]
    lnf_gain: np.ndarray
    lnf_bias: np.ndarray
    trainable_planes: tuple[int, ...] = (1,)
    base_hash: bytes | None = field(default=None, compare=False)

    @property
    def is_quantized(self) -> bool:
        return isinstance(self.blocks[0].att_qkv, QuantLinear)

    def linear_layers(self) -> list[tuple[str, QuantLinear | DenseLinear]]:
        return [(f"blocks.{b}.{name}", layer)
                for b, block in enumerate(self.blocks) for name, layer in block.linears()]

    def trainable_slots(self) -> list[tuple[str, int, np.ndarray]]:
        """``(layer_name, plane, scale_array)`` for every trainable plane, in canonical order.

        The arrays are live references; the optimizer updates them in place.
        """
        if not self.is_quantized:
            return []
        return [(name, i, layer.weights.scales[i - 1].values)
                for name, layer in self.linear_layers() for i in self.trainable_planes]

    def trainable_arrays(self) -> list[tuple[str, np.ndarray]]:
        return [(f"{name}.alpha{i}", arr) for name, i, arr in self.trainable_slots()]

    def frozen_arrays(self) -> list[tuple[str, np.ndarray]]:
        out = [("tok_emb", self.tok_emb), ("pos_emb", self.pos_emb)]
        for b, block in enumerate(self.blocks):
            for attr in ("ln1_gain", "ln1_bias", "ln2_gain", "ln2_bias"):
                out.append((f"blocks.{b}.{attr}", getattr(block, attr)))
        out += [("lnf_gain", self.lnf_gain), ("lnf_bias", self.lnf_bias)]
        for name, layer in self.linear_layers():
            out.append((f"{name}.bias", layer.bias))
            if isinstance(layer, QuantLinear):
                for i, (p, s) in enumerate(zip(layer.weights.planes, layer.weights.scales), 1):
                    out.append((f"{name}.plane{i}", p.words))
                    if i not in self.trainable_planes:
                        out.append((f"{name}.alpha{i}", s.values))
            else:
                out.append((f"{name}.weight", layer.weight))
        return out

    def copy(self) -> "ToyTransformer":
        """Copy with independent scale arrays; frozen tensors are shared."""
        blocks = []
        for block in self.blocks:
            layers = {}
            for name, layer in block.linears():
                if isinstance(layer, QuantLinear):
                    layers[name] = QuantLinear(layer.weights.copy(), layer.bias)
                else:
                    layers[name] = DenseLinear(layer.weight.copy(), layer.bias.copy())
            blocks.append(Block(**layers, ln1_gain=block.ln1_gain, ln1_bias=block.ln1_bias,
                                ln2_gain=block.ln2_gain, ln2_bias=block.ln2_bias))
        return ToyTransformer(self.config, self.tok_emb, self.pos_emb, blocks, self.lnf_gain,
                              self.lnf_bias, self.trainable_planes, self.base_hash)


def frozen_digest(model: ToyTransformer) -> str:
    """SHA-256 over every frozen tensor, in a fixed order."""
    h = hashlib.sha256()
    for name, arr in model.frozen_arrays():
        h.update(name.encode())
        h.update(np.ascontiguousarray(arr).tobytes())
    return h.hexdigest()


# -- construction ------------------------------------------------------------------

def init_dense(config: ModelConfig, seed: int, std: float = 0.1,
               emb_std: float = 0.2, pos_std: float = 0.2) -> ToyTransformer:
    """Random full-precision model standing in for a pretrained LM.

    N(0, std) weights with residual projections shrunk by 1/sqrt(2 * n_layers),
    zero biases, unit layer-norm gains.
    """
    rng = make_rng(seed)
    h = config.h
    tok_emb = rng.standard_normal((config.vocab, h)) * emb_std
    pos_emb = rng.standard_normal((config.n_ctx, h)) * pos_std
    resid_std = std / math.sqrt(2 * config.n_layers)
    blocks = []
    for _ in range(config.n_layers):
        layers = {}
        for name, (h_out, h_in) in layer_shapes(h).items():
            s = resid_std if name in ("att_output", "ffn_4h_h") else std
            layers[name] = DenseLinear(rng.standard_normal((h_out, h_in)) * s, np.zeros(h_out))
        blocks.append(Block(**layers, ln1_gain=np.ones(h), ln1_bias=np.zeros(h),
                            ln2_gain=np.ones(h), ln2_bias=np.zeros(h)))
    return ToyTransformer(config, tok_emb, pos_emb, blocks, np.ones(h), np.zeros(h))


def quantize_model(dense: ToyTransformer, qconfig: QuantConfig,
                   trainable_planes=(1,), report: list | None = None) -> ToyTransformer:
    """Post-training quantization of every linear layer.

    ``report`` (optional) receives ``(layer_name, mse)`` per layer.
    """
    for i in trainable_planes:
        if not 1 <= i <= qconfig.q:
            raise ConfigError(f"trainable plane {i} out of range 1..{qconfig.q}")
    blocks = []
    for b, block in enumerate(dense.blocks):
        layers = {}
        for name, layer in block.linears():
            try:
                w = bcq.quantize(layer.dense_weight(), qconfig)
            except ConfigError as exc:
                raise ConfigError(f"blocks.{b}.{name}: {exc}") from None
            if report is not None:
                report.append((f"blocks.{b}.{name}", bcq.mse(layer.dense_weight(), bcq.dequantize(w))))
            layers[name] = QuantLinear(w, layer.bias)
        blocks.append(Block(**layers, ln1_gain=block.ln1_gain, ln1_bias=block.ln1_bias,
                            ln2_gain=block.ln2_gain, ln2_bias=block.ln2_bias))
    config = ModelConfig(dense.config.vocab, dense.config.h, dense.config.n_layers,
                         dense.config.n_ctx, qconfig.q, qconfig.g)
    model = ToyTransformer(config, dense.tok_emb, dense.pos_emb, blocks, dense.lnf_gain,
                           dense.lnf_bias, tuple(sorted(trainable_planes)))
    from .qfile import content_hash  # qfile imports this module

    model.base_hash = content_hash(model)
    return model


def dense_twin(model: ToyTransformer) -> ToyTransformer:
    """Same network with every quantized layer replaced by its dequantized weight."""
    blocks = []
    for block in model.blocks:
        layers = {name: DenseLinear(layer.dense_weight(), np.array(layer.bias))
                  for name, layer in block.linears()}
        blocks.append(Block(**layers, ln1_gain=block.ln1_gain, ln1_bias=block.ln1_bias,
                            ln2_gain=block.ln2_gain, ln2_bias=block.ln2_bias))
    return ToyTransformer(model.config, model.tok_emb, model.pos_emb, blocks,
                          model.lnf_gain, model.lnf_bias, ())


def count_trainable(model: ToyTransformer) -> int:
    return sum(arr.size for _, arr in model.trainable_arrays())


# -- elementwise pieces ----------------------------------------------------------

def _layernorm(x, gain, bias):
    mu = x.mean(axis=-1, keepdims=True)
    xc = x - mu
    rstd = 1.0 / np.sqrt((xc * xc).mean(axis=-1, keepdims=True) + LN_EPS)
    xhat = xc * rstd
    return xhat * gain + bias, (xhat, rstd)


def _layernorm_backward(dy, gain, stats):
    xhat, rstd = stats
    dxhat = dy * gain
    return rstd * (dxhat - dxhat.mean(axis=-1, keepdims=True)
                   - xhat * (dxhat * xhat).mean(axis=-1, keepdims=True))


def gelu(x):
    return 0.5 * x * (1.0 + np.tanh(_GELU_C * (x + 0.044715 * x ** 3)))


def gelu_grad(x):
    inner = _GELU_C * (x + 0.044715 * x ** 3)
    t = np.tanh(inner)
    return 0.5 * (1.0 + t) + 0.5 * x * (1.0 - t * t) * _GELU_C * (1.0 + 3 * 0.044715 * x * x)


def _softmax(s, axis=-1):
    s = s - s.max(axis=axis, keepdims=True)
    e = np.exp(s)
    return e / e.sum(axis=axis, keepdims=True)


# -- forward / backward --------------------------------------------------------------

class TapeCache:
    """Activations saved by one forward pass; consumed by exactly one backward."""

    def __init__(self, tokens: np.ndarray):
        self.tokens = tokens
        self.blocks: list[dict] = []
        self.final: dict = {}
        self.used = False

    def consume(self) -> None:
        if self.used:
            raise CacheReuseError("this forward cache was already consumed by a backward pass")
        self.used = True


def _check_tokens(model: ToyTransformer, tokens) -> np.ndarray:
    tokens = np.asarray(tokens)
    if tokens.ndim == 1:
        tokens = tokens[None, :]
    if tokens.ndim != 2 or tokens.shape[1] == 0:
        raise InputError(f"tokens must be a non-empty sequence or batch, got shape {tokens.shape}")
    if not np.issubdtype(tokens.dtype, np.integer):
        raise InputError("token ids must be integers")
    if tokens.shape[1] > model.config.n_ctx:
        raise InputError(f"sequence length {tokens.shape[1]} exceeds n_ctx={model.config.n_ctx}")
    if tokens.min() < 0 or tokens.max() >= model.config.vocab:
        raise InputError(f"token id out of range [0, {model.config.vocab})")
    return tokens


def forward_lm(model: ToyTransformer, tokens, lut_mu: int | None = None):
    """Logits for a token sequence (T,) -> (T, vocab) or batch (B, T) -> (B, T, vocab).

    With ``lut_mu`` set, quantized layers run through the lookup-table kernel.
    """
    single = np.ndim(tokens) == 1
    tokens = _check_tokens(model, tokens)
    B, T = tokens.shape
    h = model.config.h
    cache = TapeCache(tokens)
    mask = np.triu(np.ones((T, T), dtype=bool), k=1)
    inv_sqrt_h = 1.0 / math.sqrt(h)

    def lin(layer, x2d):
        if lut_mu is not None and isinstance(layer, QuantLinear):
            return layer.forward_lut(x2d, lut_mu)
        return layer.forward(x2d)

    x = model.tok_emb[tokens] + model.pos_emb[:T]
    for block in model.blocks:
        c = {}
        a, c["ln1"] = _layernorm(x, block.ln1_gain, block.ln1_bias)
        c["att_qkv_in"] = a.reshape(B * T, h)
        qkv = lin(block.att_qkv, c["att_qkv_in"]).reshape(B, T, 3 * h)
        q, k, v = qkv[..., :h], qkv[..., h:2 * h], qkv[..., 2 * h:]
        scores = np.einsum("bth,bsh->bts", q, k) * inv_sqrt_h
        scores = np.where(mask, -np.inf, scores)
        p = _softmax(scores)
        o = np.einsum("bts,bsh->bth", p, v)
        c.update(q=q, k=k, v=v, p=p)
        c["att_output_in"] = o.reshape(B * T, h)
        x = x + lin(block.att_output, c["att_output_in"]).reshape(B, T, h)

        m, c["ln2"] = _layernorm(x, block.ln2_gain, block.ln2_bias)
        c["ffn_h_4h_in"] = m.reshape(B * T, h)
        u = lin(block.ffn_h_4h, c["ffn_h_4h_in"])
        c["u"] = u
        c["ffn_4h_h_in"] = gelu(u)
        x = x + lin(block.ffn_4h_h, c["ffn_4h_h_in"]).reshape(B, T, h)
        cache.blocks.append(c)

    xf, cache.final["lnf"] = _layernorm(x, model.lnf_gain, model.lnf_bias)
    logits = xf @ model.tok_emb.T
    return (logits[0] if single else logits), cache


def backward_lm(model: ToyTransformer, cache: TapeCache, dlogits,
                planes=None, want_input_grad: bool = False):
    """Backpropagate ``dlogits`` and return alpha gradients (already divided by g_L).

    Result is a dict ``layer_name -> {plane: gradient}`` for ``planes``
    (defaults to the model's trainable planes). With ``want_input_grad`` a
    second value, the gradient w.r.t. the summed input embeddings, is returned.
    """
    cache.consume()
    planes = model.trainable_planes if planes is None else tuple(planes)
    B, T = cache.tokens.shape
    h = model.config.h
    dlogits = np.asarray(dlogits, dtype=np.float64).reshape(B, T, -1)
    inv_sqrt_h = 1.0 / math.sqrt(h)
    grads: dict[str, dict[int, np.ndarray]] = {}

    def lin_back(name, layer, x_in, dy2d):
        if planes and isinstance(layer, QuantLinear):
            grads[name] = layer.grad_alphas(x_in, dy2d, planes)
        return layer.backward_input(dy2d)

    dxf = dlogits @ model.tok_emb
    dx = _layernorm_backward(dxf, model.lnf_gain, cache.final["lnf"])
    for b in reversed(range(len(model.blocks))):
        block, c = model.blocks[b], cache.blocks[b]
        prefix = f"blocks.{b}."
        # feed-forward branch
        dy = dx.reshape(B * T, h)
        dact = lin_back(prefix + "ffn_4h_h", block.ffn_4h_h, c["ffn_4h_h_in"], dy)
        du = dact * gelu_grad(c["u"])
        dm = lin_back(prefix + "ffn_h_4h", block.ffn_h_4h, c["ffn_h_4h_in"], du)
        dx = dx + _layernorm_backward(dm.reshape(B, T, h), block.ln2_gain, c["ln2"])
        # attention branch
        do = lin_back(prefix + "att_output", block.att_output, c["att_output_in"],
                      dx.reshape(B * T, h)).reshape(B, T, h)
        p, q, k, v = c["p"], c["q"], c["k"], c["v"]
        dv = np.einsum("bts,bth->bsh", p, do)
        dp = np.einsum("bth,bsh->bts", do, v)
        ds = p * (dp - np.sum(dp * p, axis=-1, keepdims=True)) * inv_sqrt_h
        dq = np.einsum("bts,bsh->bth", ds, k)
        dk = np.einsum("bts,bth->bsh", ds, q)
        dqkv = np.concatenate([dq, dk, dv], axis=-1).reshape(B * T, 3 * h)
        da = lin_back(prefix + "att_qkv", block.att_qkv, c["att_qkv_in"], dqkv)
        dx = dx + _layernorm_backward(da.reshape(B, T, h), block.ln1_gain, c["ln1"])
    if want_input_grad:
        return grads, dx
    return grads


def cross_entropy(logits, targets) -> tuple[float, np.ndarray, int]:
    """Mean cross-entropy over positions whose target is >= 0.

    Returns ``(loss, dlogits, n_scored)``; targets of -1 are ignored.
    """
    logits = np.asarray(logits, dtype=np.float64)
    targets = np.asarray(targets)
    flat = logits.reshape(-1, logits.shape[-1])
    t = targets.reshape(-1)
    if t.shape[0] != flat.shape[0]:
        raise ShapeError(f"{t.shape[0]} targets for {flat.shape[0]} positions")
    valid = t >= 0
    n = int(valid.sum())
    if n == 0:
        return 0.0, np.zeros_like(logits), 0
    z = flat - flat.max(axis=1, keepdims=True)
    logp = z - np.log(np.exp(z).sum(axis=1, keepdims=True))
    rows = np.nonzero(valid)[0]
    loss = -float(logp[rows, t[rows]].sum()) / n
    d = np.zeros_like(flat)
    d[rows] = np.exp(logp[rows])
    d[rows, t[rows]] -= 1.0
    return loss, (d / n).reshape(logits.shape), n


def loss_and_grads(model: ToyTransformer, tokens, targets, planes=None):
    """Cross-entropy loss and its alpha gradients (divided by g_L) for trainable planes."""
    tokens = np.asarray(tokens)
    targets = np.asarray(targets)
    if tokens.shape != targets.shape:
        raise ShapeError(f"tokens {tokens.shape} and targets {targets.shape} differ")
    logits, cache = forward_lm(model, tokens)
    loss, dlogits, _ = cross_entropy(logits, targets)
    return loss, backward_lm(model, cache, dlogits, planes)
