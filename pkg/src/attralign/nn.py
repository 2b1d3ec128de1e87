"""Small trainable classifiers: a compact CNN and a tiny patch-attention
transformer, both emitting per-label logits for multi-label classification.

Models are built entirely on the autodiff tensor ops, so logits are
differentiable with respect to both parameters and input pixels, and
gradient explanations can be differentiated again during fine-tuning.
"""

from __future__ import annotations

import json
import struct
from typing import Optional

import numpy as np

from . import autodiff as ad
from .autodiff import Tensor

CHECKPOINT_MAGIC = b"ATCK"
CHECKPOINT_VERSION = 1


def _kaiming_uniform(rng: np.random.Generator, shape, fan_in: int) -> np.ndarray:
    bound = np.sqrt(6.0 / fan_in)
    return rng.uniform(-bound, bound, size=shape)


def _trunc_normal(rng: np.random.Generator, shape, std: float = 0.02) -> np.ndarray:
    return np.clip(rng.normal(0.0, std, size=shape), -2 * std, 2 * std)


class Dense:
    def __init__(self, in_dim: int, out_dim: int, rng: np.random.Generator, name: str,
                 init: str = "kaiming"):
        if init == "kaiming":
            w = _kaiming_uniform(rng, (in_dim, out_dim), in_dim)
        else:
            w = _trunc_normal(rng, (in_dim, out_dim))
        self.weight = Tensor(w, requires_grad=True, name=f"{name}.weight")
        self.bias = Tensor(np.zeros(out_dim), requires_grad=True, name=f"{name}.bias")
        self.in_dim, self.out_dim = in_dim, out_dim

    kind = "dense"

    def params(self):
        return [self.weight, self.bias]

    def __call__(self, x: Tensor) -> Tensor:
        return ad.add(ad.matmul(x, self.weight), ad.reshape(self.bias, (1, self.out_dim)))


class Conv2d:
    def __init__(self, cin: int, cout: int, kernel: int, rng: np.random.Generator,
                 name: str, stride: int = 1, padding: int = 0):
        fan_in = cin * kernel * kernel
        self.weight = Tensor(_kaiming_uniform(rng, (cout, cin, kernel, kernel), fan_in),
                             requires_grad=True, name=f"{name}.weight")
        self.bias = Tensor(np.zeros(cout), requires_grad=True, name=f"{name}.bias")
        self.stride, self.padding = stride, padding

    kind = "conv2d"

    def params(self):
        return [self.weight, self.bias]

    def __call__(self, x: Tensor) -> Tensor:
        return ad.conv2d(x, self.weight, self.bias, stride=self.stride, padding=self.padding)


class ReLU:
    kind = "relu"

    def params(self):
        return []

    def __call__(self, x: Tensor) -> Tensor:
        return ad.relu(x)


class MaxPool2d:
    kind = "max-pool"

    def __init__(self, kernel: int):
        self.kernel = kernel

    def params(self):
        return []

    def __call__(self, x: Tensor) -> Tensor:
        return ad.max_pool2d(x, self.kernel)


class Flatten:
    kind = "flatten"

    def params(self):
        return []

    def __call__(self, x: Tensor) -> Tensor:
        b = x.shape[0]
        return ad.reshape(x, (b, int(np.prod(x.shape[1:]))))


class Model:
    """Base: ordered parameterized layers mapping image batches to logits."""

    arch: dict
    input_shape: tuple
    num_labels: int

    def __init__(self):
        self.metadata: dict = {}

    def parameters(self) -> list:
        raise NotImplementedError

    def forward(self, x: Tensor) -> Tensor:
        raise NotImplementedError

    def param_count(self) -> int:
        return sum(p.size for p in self.parameters())

    def _check_batch(self, x: Tensor):
        if x.ndim != 4 or tuple(x.shape[1:]) != tuple(self.input_shape):
            raise ad.ShapeError(
                f"forward: batch shape {x.shape} does not match input shape "
                f"(B, {', '.join(map(str, self.input_shape))})")

    def _validate_construction(self):
        with ad.no_grad():
            probe = self.forward(Tensor(np.zeros((1,) + tuple(self.input_shape))))
        if probe.shape != (1, self.num_labels):
            raise ValueError(
                f"layer composition yields {probe.shape}, expected (1, {self.num_labels})")


class SmallCNN(Model):
    """3 conv/relu/max-pool stages and a dense head; total pooling factor 8."""

    POOL_FACTOR = 8

    def __init__(self, input_shape, num_labels: int, width_multiplier: float = 1.0,
                 seed: int = 0):
        super().__init__()
        c, h, w = input_shape
        if h % self.POOL_FACTOR or w % self.POOL_FACTOR:
            raise ValueError(
                f"input {h}x{w} not divisible by pooling factor {self.POOL_FACTOR}")
        if width_multiplier <= 0:
            raise ValueError("width_multiplier must be positive")
        self.input_shape = (c, h, w)
        self.num_labels = num_labels
        self.arch = {"kind": "small_cnn", "input_shape": list(input_shape),
                     "num_labels": num_labels, "width_multiplier": width_multiplier}
        rng = np.random.default_rng(seed)
        widths = [max(1, round(b * width_multiplier)) for b in (16, 32, 64)]
        self.layers = [
            Conv2d(c, widths[0], 3, rng, "conv1", padding=1), ReLU(), MaxPool2d(2),
            Conv2d(widths[0], widths[1], 3, rng, "conv2", padding=1), ReLU(), MaxPool2d(2),
            Conv2d(widths[1], widths[2], 3, rng, "conv3", padding=1), ReLU(), MaxPool2d(2),
            Flatten(),
            Dense(widths[2] * (h // 8) * (w // 8), num_labels, rng, "head"),
        ]
        self._validate_construction()

    def parameters(self):
        return [p for layer in self.layers for p in layer.params()]

    def forward(self, x: Tensor) -> Tensor:
        self._check_batch(x)
        for layer in self.layers:
            x = layer(x)
        return x


class _AttentionBlock:
    """Pre-norm transformer block: LN -> MHSA -> residual, LN -> MLP -> residual."""

    def __init__(self, dim: int, heads: int, rng: np.random.Generator, name: str):
        if dim % heads:
            raise ValueError(f"dim {dim} not divisible by heads {heads}")
        self.dim, self.heads = dim, heads
        self.head_dim = dim // heads
        self.ln1_g = Tensor(np.ones(dim), requires_grad=True, name=f"{name}.ln1.gamma")
        self.ln1_b = Tensor(np.zeros(dim), requires_grad=True, name=f"{name}.ln1.beta")
        self.ln2_g = Tensor(np.ones(dim), requires_grad=True, name=f"{name}.ln2.gamma")
        self.ln2_b = Tensor(np.zeros(dim), requires_grad=True, name=f"{name}.ln2.beta")
        mk = lambda suffix, shape: Tensor(_trunc_normal(rng, shape), requires_grad=True,
                                          name=f"{name}.{suffix}")
        self.wq, self.wk, self.wv, self.wo = (mk(s, (dim, dim))
                                              for s in ("wq", "wk", "wv", "wo"))
        self.bq = Tensor(np.zeros(dim), requires_grad=True, name=f"{name}.bq")
        self.bk = Tensor(np.zeros(dim), requires_grad=True, name=f"{name}.bk")
        self.bv = Tensor(np.zeros(dim), requires_grad=True, name=f"{name}.bv")
        self.bo = Tensor(np.zeros(dim), requires_grad=True, name=f"{name}.bo")
        hidden = 4 * dim
        self.w1 = mk("mlp.w1", (dim, hidden))
        self.b1 = Tensor(np.zeros(hidden), requires_grad=True, name=f"{name}.mlp.b1")
        self.w2 = mk("mlp.w2", (hidden, dim))
        self.b2 = Tensor(np.zeros(dim), requires_grad=True, name=f"{name}.mlp.b2")

    def params(self):
        return [self.ln1_g, self.ln1_b, self.wq, self.bq, self.wk, self.bk,
                self.wv, self.bv, self.wo, self.bo,
                self.ln2_g, self.ln2_b, self.w1, self.b1, self.w2, self.b2]

    def _project(self, x2d: Tensor, w: Tensor, b: Tensor) -> Tensor:
        return ad.add(ad.matmul(x2d, w), ad.reshape(b, (1, self.dim)))

    def _split_heads(self, x: Tensor, b: int, t: int) -> Tensor:
        x = ad.reshape(x, (b, t, self.heads, self.head_dim))
        x = ad.transpose(x, (0, 2, 1, 3))
        return ad.reshape(x, (b * self.heads, t, self.head_dim))

    def __call__(self, x: Tensor) -> Tensor:
        b, t, d = x.shape
        h = ad.layernorm(x, self.ln1_g, self.ln1_b)
        h2 = ad.reshape(h, (b * t, d))
        q = self._split_heads(ad.reshape(self._project(h2, self.wq, self.bq),
                                         (b, t, d)), b, t)
        k = self._split_heads(ad.reshape(self._project(h2, self.wk, self.bk),
                                         (b, t, d)), b, t)
        v = self._split_heads(ad.reshape(self._project(h2, self.wv, self.bv),
                                         (b, t, d)), b, t)
        scores = ad.mul(ad.matmul(q, ad.transpose(k, (0, 2, 1))),
                        1.0 / np.sqrt(self.head_dim))
        attn = ad.softmax(scores, axis=-1)
        ctx = ad.matmul(attn, v)
        ctx = ad.reshape(ctx, (b, self.heads, t, self.head_dim))
        ctx = ad.reshape(ad.transpose(ctx, (0, 2, 1, 3)), (b * t, d))
        out = ad.add(ad.matmul(ctx, self.wo), ad.reshape(self.bo, (1, d)))
        x = ad.add(x, ad.reshape(out, (b, t, d)))

        h = ad.layernorm(x, self.ln2_g, self.ln2_b)
        h2 = ad.reshape(h, (b * t, d))
        m = ad.gelu(ad.add(ad.matmul(h2, self.w1), ad.reshape(self.b1, (1, -1))))
        m = ad.add(ad.matmul(m, self.w2), ad.reshape(self.b2, (1, d)))
        return ad.add(x, ad.reshape(m, (b, t, d)))


class TinyViT(Model):
    """Patch embedding -> transformer blocks -> token mean-pool -> dense head."""

    def __init__(self, input_shape, num_labels: int, patch: int = 8, depth: int = 2,
                 heads: int = 2, dim: int = 32, seed: int = 0):
        super().__init__()
        c, h, w = input_shape
        if depth < 1:
            raise ValueError("depth must be >= 1")
        if h % patch or w % patch:
            raise ValueError(f"input {h}x{w} not divisible by patch {patch}")
        self.input_shape = (c, h, w)
        self.num_labels = num_labels
        self.patch, self.depth, self.heads, self.dim = patch, depth, heads, dim
        self.tokens = (h // patch) * (w // patch)
        self.arch = {"kind": "tiny_vit", "input_shape": list(input_shape),
                     "num_labels": num_labels, "patch": patch, "depth": depth,
                     "heads": heads, "dim": dim}
        rng = np.random.default_rng(seed)
        self.patch_proj = Conv2d(c, dim, patch, rng, "patch_embed",
                                 stride=patch, padding=0)
        self.pos = Tensor(_trunc_normal(rng, (1, self.tokens, dim)),
                          requires_grad=True, name="pos_embed")
        self.blocks = [_AttentionBlock(dim, heads, rng, f"block{i}")
                       for i in range(depth)]
        self.ln_f_g = Tensor(np.ones(dim), requires_grad=True, name="ln_f.gamma")
        self.ln_f_b = Tensor(np.zeros(dim), requires_grad=True, name="ln_f.beta")
        self.head = Dense(dim, num_labels, rng, "head")
        self._validate_construction()

    def parameters(self):
        ps = self.patch_proj.params() + [self.pos]
        for blk in self.blocks:
            ps += blk.params()
        ps += [self.ln_f_g, self.ln_f_b] + self.head.params()
        return ps

    def embed_patches(self, x: Tensor) -> Tensor:
        """Token embeddings before position encoding: (B, tokens, dim)."""
        e = self.patch_proj(x)
        b, d = e.shape[0], e.shape[1]
        e = ad.reshape(e, (b, d, self.tokens))
        return ad.transpose(e, (0, 2, 1))

    def forward(self, x: Tensor) -> Tensor:
        self._check_batch(x)
        tok = ad.add(self.embed_patches(x), self.pos)
        for blk in self.blocks:
            tok = blk(tok)
        tok = ad.layernorm(tok, self.ln_f_g, self.ln_f_b)
        pooled = ad.tmean(tok, axis=1)
        return self.head(pooled)


def build_small_cnn(input_shape, num_labels: int, width_multiplier: float = 1.0,
                    seed: int = 0) -> SmallCNN:
    return SmallCNN(input_shape, num_labels, width_multiplier, seed)


def build_tiny_vit(input_shape, num_labels: int, patch: int = 8, depth: int = 2,
                   heads: int = 2, dim: int = 32, seed: int = 0) -> TinyViT:
    return TinyViT(input_shape, num_labels, patch, depth, heads, dim, seed)


def build_model(arch: dict, seed: int = 0) -> Model:
    """Construct a model from an architecture descriptor dict."""
    kind = arch.get("kind")
    a = {k: v for k, v in arch.items() if k != "kind"}
    a["input_shape"] = tuple(a["input_shape"])
    if kind == "small_cnn":
        return build_small_cnn(seed=seed, **a)
    if kind == "tiny_vit":
        return build_tiny_vit(seed=seed, **a)
    raise ValueError(f"unknown architecture kind {kind!r}")


# ---------------------------------------------------------------------------
# checkpoints: versioned header + canonical descriptor + per-tensor blobs
# ---------------------------------------------------------------------------

def save_checkpoint(model: Model, path: str):
    """magic | u32 version | u64 header length | header JSON | tensors.

    Each tensor: u64 element count followed by little-endian float64 values.
    The header stores the architecture descriptor (canonical JSON, sorted
    keys) and training metadata; round-trips are bit-exact.
    """
    header = {"arch": model.arch, "metadata": model.metadata,
              "params": [{"name": p.name, "shape": list(p.shape)}
                         for p in model.parameters()]}
    blob = json.dumps(header, sort_keys=True, separators=(",", ":")).encode("utf-8")
    with open(path, "wb") as fh:
        fh.write(CHECKPOINT_MAGIC)
        fh.write(struct.pack("<I", CHECKPOINT_VERSION))
        fh.write(struct.pack("<Q", len(blob)))
        fh.write(blob)
        for p in model.parameters():
            fh.write(struct.pack("<Q", p.size))
            fh.write(p.data.astype("<f8").tobytes())


def load_checkpoint(path: str) -> Model:
    with open(path, "rb") as fh:
        magic = fh.read(4)
        if magic != CHECKPOINT_MAGIC:
            raise ValueError(f"not a checkpoint file (magic {magic!r})")
        version = struct.unpack("<I", fh.read(4))[0]
        if version != CHECKPOINT_VERSION:
            raise ValueError(f"unsupported checkpoint version {version}")
        hlen = struct.unpack("<Q", fh.read(8))[0]
        header = json.loads(fh.read(hlen).decode("utf-8"))
        model = build_model(header["arch"])
        model.metadata = header["metadata"]
        for p, meta in zip(model.parameters(), header["params"]):
            count = struct.unpack("<Q", fh.read(8))[0]
            shape = tuple(meta["shape"])
            if count != p.size or shape != p.shape:
                raise ValueError(
                    f"checkpoint/model mismatch at {meta['name']}: "
                    f"{count} values for shape {p.shape}")
            arr = np.frombuffer(fh.read(count * 8), dtype="<f8").reshape(shape)
            p.data = arr.astype(np.float64).copy()
    return model
