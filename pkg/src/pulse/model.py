"""Small transformer sequence classifier with explicit backpropagation.

The network is a post-norm encoder stack over token + sinusoidal position
embeddings, pooled at the first token (bidirectional attention) or at the
last real token (causal attention), followed by a linear two-class head.
Everything is plain numpy so the analytic gradients can be checked against
finite differences.
"""

from __future__ import annotations

import json
import logging
import math
import struct
from dataclasses import asdict, dataclass, field
from pathlib import Path
from typing import Sequence

import numpy as np

from .tokenizer import TokenSequence

logger = logging.getLogger(__name__)

BIDIRECTIONAL = "bidirectional"
CAUSAL = "causal"
FIRST_TOKEN = "first_token"
LAST_TOKEN = "last_token"
LABEL_NAMES = ("benign", "malicious")
LN_EPS = 1e-5
_GELU_C = math.sqrt(2.0 / math.pi)
CHECKPOINT_MAGIC = b"PULSECK1"


class ContractViolation(ValueError):
    pass


@dataclass(frozen=True)
class ModelConfig:
    vocab_size: int
    n_layers: int = 2
    hidden: int = 64
    n_heads: int = 4
    ffn: int = 256
    max_len: int = 128
    attention: str = BIDIRECTIONAL
    pooling: str = FIRST_TOKEN
    dropout: float = 0.0
    seed: int = 0

    def __post_init__(self):
        if self.hidden % self.n_heads:
            raise ContractViolation(f"hidden ({self.hidden}) must be divisible by n_heads ({self.n_heads})")
        if self.attention not in (BIDIRECTIONAL, CAUSAL):
            raise ContractViolation(f"unknown attention mode {self.attention!r}")
        expected = LAST_TOKEN if self.attention == CAUSAL else FIRST_TOKEN
        if self.pooling != expected:
            raise ContractViolation(f"{self.attention} attention requires pooling={expected}")
        if not 0.0 <= self.dropout < 1.0:
            raise ContractViolation("dropout must be in [0, 1)")
        if min(self.vocab_size, self.n_layers, self.hidden, self.ffn, self.max_len) < 1:
            raise ContractViolation("sizes must be positive")

    @classmethod
    def from_dict(cls, d: dict) -> "ModelConfig":
        return cls(**d)


def sinusoidal_positions(max_len: int, hidden: int) -> np.ndarray:
    pos = np.arange(max_len, dtype=np.float64)[:, None]
    i = np.arange(hidden, dtype=np.float64)[None, :]
    angle = pos / np.power(10000.0, (2 * (i // 2)) / hidden)
    return np.where(i % 2 == 0, np.sin(angle), np.cos(angle))


def _layer_names(l: int) -> list[str]:
    return [f"layer{l}.{n}" for n in
            ("wq", "bq", "wk", "bk", "wv", "bv", "wo", "bo", "ln1_g", "ln1_b",
             "w1", "b1", "w2", "b2", "ln2_g", "ln2_b")]


@dataclass
class ClassifierModel:
    config: ModelConfig
    params: dict[str, np.ndarray]
    positions: np.ndarray = field(init=False, repr=False)

    def __post_init__(self):
        self.positions = sinusoidal_positions(self.config.max_len, self.config.hidden).astype(self.dtype)
        self.check()

    @property
    def dtype(self):
        return self.params["embed"].dtype

    def param_names(self) -> list[str]:
        names = ["embed"]
        for l in range(self.config.n_layers):
            names.extend(_layer_names(l))
        return names + ["head_w", "head_b"]

    def expected_shapes(self) -> dict[str, tuple[int, ...]]:
        c = self.config
        H, F = c.hidden, c.ffn
        shapes = {"embed": (c.vocab_size, H), "head_w": (H, 2), "head_b": (2,)}
        for l in range(c.n_layers):
            p = f"layer{l}."
            for n in ("wq", "wk", "wv", "wo"):
                shapes[p + n] = (H, H)
            for n in ("bq", "bk", "bv", "bo", "ln1_g", "ln1_b", "b2", "ln2_g", "ln2_b"):
                shapes[p + n] = (H,)
            shapes[p + "w1"] = (H, F)
            shapes[p + "b1"] = (F,)
            shapes[p + "w2"] = (F, H)
        return shapes

    def check(self) -> None:
        shapes = self.expected_shapes()
        if set(shapes) != set(self.params):
            raise ContractViolation("parameter set does not match config")
        for name, shape in shapes.items():
            arr = self.params[name]
            if arr.shape != shape:
                raise ContractViolation(f"{name}: shape {arr.shape} != {shape}")
            if not np.all(np.isfinite(arr)):
                raise ContractViolation(f"{name}: non-finite values")

    def astype(self, dtype) -> "ClassifierModel":
        return ClassifierModel(self.config, {k: v.astype(dtype) for k, v in self.params.items()})

    def n_parameters(self) -> int:
        return int(sum(v.size for v in self.params.values()))

    # -- forward / backward ------------------------------------------------

    def _forward(self, ids: np.ndarray, training: bool = False, rng=None):
        c = self.config
        P = self.params
        B, T = ids.shape
        H, nh = c.hidden, c.n_heads
        dh = H // nh
        valid = ids != PAD_ID
        n_real = valid.sum(axis=1)
        if np.any(n_real < 1):
            raise ContractViolation("sequence without real tokens")
        allowed = np.broadcast_to(valid[:, None, None, :], (B, 1, T, T))
        if c.attention == CAUSAL:
            allowed = allowed & np.tril(np.ones((T, T), dtype=bool))[None, None]
        drop = c.dropout if training else 0.0

        x = P["embed"][ids] + self.positions[:T]
        cache = {"ids": ids, "allowed": allowed, "layers": [], "n_real": n_real}
        scale = 1.0 / math.sqrt(dh)
        for l in range(c.n_layers):
            p = f"layer{l}."
            lc = {"x": x}
            q = (x @ P[p + "wq"] + P[p + "bq"]).reshape(B, T, nh, dh).transpose(0, 2, 1, 3)
            k = (x @ P[p + "wk"] + P[p + "bk"]).reshape(B, T, nh, dh).transpose(0, 2, 1, 3)
            v = (x @ P[p + "wv"] + P[p + "bv"]).reshape(B, T, nh, dh).transpose(0, 2, 1, 3)
            s = np.where(allowed, (q @ k.transpose(0, 1, 3, 2)) * scale, -np.inf)
            s = s - s.max(axis=-1, keepdims=True)
            a = np.exp(s)
            a /= a.sum(axis=-1, keepdims=True)
            ctx = (a @ v).transpose(0, 2, 1, 3).reshape(B, T, H)
            o = ctx @ P[p + "wo"] + P[p + "bo"]
            m1 = _dropout_mask(o.shape, drop, rng, o.dtype)
            if m1 is not None:
                o = o * m1
            h1, ln1 = _layer_norm(x + o, P[p + "ln1_g"], P[p + "ln1_b"])
            u = h1 @ P[p + "w1"] + P[p + "b1"]
            g = _gelu(u)
            f = g @ P[p + "w2"] + P[p + "b2"]
            m2 = _dropout_mask(f.shape, drop, rng, f.dtype)
            if m2 is not None:
                f = f * m2
            x, ln2 = _layer_norm(h1 + f, P[p + "ln2_g"], P[p + "ln2_b"])
            lc.update(q=q, k=k, v=v, a=a, ctx=ctx, m1=m1, h1=h1, ln1=ln1, u=u, g=g, m2=m2, ln2=ln2)
            cache["layers"].append(lc)

        pos = np.zeros(B, dtype=np.int64) if c.pooling == FIRST_TOKEN else n_real - 1
        pooled = x[np.arange(B), pos]
        logits = pooled @ P["head_w"] + P["head_b"]
        cache.update(pos=pos, pooled=pooled, T=T)
        return logits, cache

    def _backward(self, dlogits: np.ndarray, cache) -> dict[str, np.ndarray]:
        c = self.config
        P = self.params
        B, T = cache["ids"].shape
        H, nh = c.hidden, c.n_heads
        dh = H // nh
        scale = 1.0 / math.sqrt(dh)
        grads = {k: np.zeros_like(v) for k, v in P.items()}

        grads["head_w"] = cache["pooled"].T @ dlogits
        grads["head_b"] = dlogits.sum(axis=0)
        dx = np.zeros((B, T, H), dtype=dlogits.dtype)
        dx[np.arange(B), cache["pos"]] = dlogits @ P["head_w"].T

        for l in reversed(range(c.n_layers)):
            p = f"layer{l}."
            lc = cache["layers"][l]
            # second sublayer: x_out = LN(h1 + f)
            dr2, grads[p + "ln2_g"], grads[p + "ln2_b"] = _layer_norm_backward(dx, lc["ln2"], P[p + "ln2_g"])
            df = dr2 if lc["m2"] is None else dr2 * lc["m2"]
            grads[p + "w2"] = _flat(lc["g"]).T @ _flat(df)
            grads[p + "b2"] = df.sum(axis=(0, 1))
            dg = df @ P[p + "w2"].T
            du = dg * _gelu_grad(lc["u"])
            grads[p + "w1"] = _flat(lc["h1"]).T @ _flat(du)
            grads[p + "b1"] = du.sum(axis=(0, 1))
            dh1 = dr2 + du @ P[p + "w1"].T
            # first sublayer: h1 = LN(x + attn(x))
            dr1, grads[p + "ln1_g"], grads[p + "ln1_b"] = _layer_norm_backward(dh1, lc["ln1"], P[p + "ln1_g"])
            do = dr1 if lc["m1"] is None else dr1 * lc["m1"]
            grads[p + "wo"] = _flat(lc["ctx"]).T @ _flat(do)
            grads[p + "bo"] = do.sum(axis=(0, 1))
            dctx = (do @ P[p + "wo"].T).reshape(B, T, nh, dh).transpose(0, 2, 1, 3)
            a, q, k, v = lc["a"], lc["q"], lc["k"], lc["v"]
            da = dctx @ v.transpose(0, 1, 3, 2)
            dv = a.transpose(0, 1, 3, 2) @ dctx
            ds = a * (da - (da * a).sum(axis=-1, keepdims=True)) * scale
            dq = ds @ k
            dk = ds.transpose(0, 1, 3, 2) @ q
            x_in = _flat(lc["x"])
            dxin = dr1.copy()
            for name, d in (("q", dq), ("k", dk), ("v", dv)):
                d2 = d.transpose(0, 2, 1, 3).reshape(B * T, H)
                grads[p + "w" + name] = x_in.T @ d2
                grads[p + "b" + name] = d2.sum(axis=0)
                dxin += (d2 @ P[p + "w" + name].T).reshape(B, T, H)
            dx = dxin

        ids = cache["ids"]
        np.add.at(grads["embed"], ids.ravel(), dx.reshape(B * T, H))
        return grads

    def loss_and_grads(self, ids: np.ndarray, labels: np.ndarray, training: bool = False, rng=None):
        """Mean cross-entropy of the batch and its gradient w.r.t. every parameter."""
        logits, cache = self._forward(ids, training=training, rng=rng)
        probs = _softmax(logits)
        n = ids.shape[0]
        loss = float(-np.mean(np.log(np.maximum(probs[np.arange(n), labels], 1e-300))))
        dlogits = probs.copy()
        dlogits[np.arange(n), labels] -= 1.0
        dlogits /= n
        return loss, self._backward(dlogits, cache)

    def logits(self, ids: np.ndarray) -> np.ndarray:
        ids = _trim(ids)
        return self._forward(ids)[0]


PAD_ID = 0  # tokenizer places [PAD] at id 0


def _flat(x: np.ndarray) -> np.ndarray:
    return x.reshape(-1, x.shape[-1])


def _softmax(z: np.ndarray) -> np.ndarray:
    z = z - z.max(axis=-1, keepdims=True)
    e = np.exp(z)
    return e / e.sum(axis=-1, keepdims=True)


def _gelu(u):
    return 0.5 * u * (1.0 + np.tanh(_GELU_C * (u + 0.044715 * u ** 3)))


def _gelu_grad(u):
    t = np.tanh(_GELU_C * (u + 0.044715 * u ** 3))
    return 0.5 * (1.0 + t) + 0.5 * u * (1.0 - t * t) * _GELU_C * (1.0 + 3 * 0.044715 * u * u)


def _layer_norm(x, g, b):
    mu = x.mean(axis=-1, keepdims=True)
    xc = x - mu
    inv = 1.0 / np.sqrt((xc * xc).mean(axis=-1, keepdims=True) + LN_EPS)
    xhat = xc * inv
    return xhat * g + b, (xhat, inv)


def _layer_norm_backward(dy, cache, g):
    xhat, inv = cache
    dg = (dy * xhat).sum(axis=(0, 1))
    db = dy.sum(axis=(0, 1))
    dxhat = dy * g
    n = xhat.shape[-1]
    dx = inv / n * (n * dxhat - dxhat.sum(axis=-1, keepdims=True)
                    - xhat * (dxhat * xhat).sum(axis=-1, keepdims=True))
    return dx, dg, db


def _dropout_mask(shape, rate, rng, dtype):
    if rate <= 0.0:
        return None
    if rng is None:
        raise ContractViolation("dropout during training needs an rng")
    keep = 1.0 - rate
    return (rng.random(shape) < keep).astype(dtype) / keep


def _trim(ids: np.ndarray) -> np.ndarray:
    """Drop trailing columns that are padding for every row (masked anyway)."""
    real = (ids != PAD_ID).any(axis=0)
    t = int(np.flatnonzero(real)[-1]) + 1 if real.any() else 1
    return ids[:, :t]


def _as_ids(batch, max_len: int) -> np.ndarray:
    if isinstance(batch, np.ndarray):
        ids = batch
    else:
        ids = np.stack([s.ids if isinstance(s, TokenSequence) else np.asarray(s) for s in batch])
    if ids.ndim != 2 or ids.shape[1] != max_len:
        raise ContractViolation(f"expected sequences of length {max_len}, got shape {ids.shape}")
    return ids.astype(np.int64, copy=False)


# -- public operations --------------------------------------------------------

def init_model(config: ModelConfig, dtype=np.float32) -> ClassifierModel:
    """Scaled-uniform initialization, deterministic in ``config.seed``."""
    rng = np.random.default_rng(config.seed)
    H, F = config.hidden, config.ffn
    params: dict[str, np.ndarray] = {}

    def uniform(shape, fan_in, fan_out):
        limit = math.sqrt(6.0 / (fan_in + fan_out))
        return rng.uniform(-limit, limit, size=shape)

    params["embed"] = rng.uniform(-0.5, 0.5, size=(config.vocab_size, H)) * math.sqrt(3.0)
    for l in range(config.n_layers):
        p = f"layer{l}."
        for n in ("wq", "wk", "wv", "wo"):
            params[p + n] = uniform((H, H), H, H)
        for n in ("bq", "bk", "bv", "bo", "ln1_b", "b2", "ln2_b"):
            params[p + n] = np.zeros(H)
        params[p + "ln1_g"] = np.ones(H)
        params[p + "ln2_g"] = np.ones(H)
        params[p + "w1"] = uniform((H, F), H, F)
        params[p + "b1"] = np.zeros(F)
        params[p + "w2"] = uniform((F, H), F, H)
    params["head_w"] = uniform((H, 2), H, 2)
    params["head_b"] = np.zeros(2)
    return ClassifierModel(config, {k: v.astype(dtype) for k, v in params.items()})


def forward(model: ClassifierModel, batch) -> tuple[np.ndarray, np.ndarray]:
    """Inference for a batch of equal-length sequences; returns (logits, probabilities)."""
    ids = _as_ids(batch, model.config.max_len)
    logits = model.logits(ids)
    return logits, _softmax(logits.astype(np.float64))


@dataclass(frozen=True)
class FunctionVerdict:
    label: str
    probability: float
    logits: tuple[float, float]


def classify_function(model: ClassifierModel, seq) -> FunctionVerdict:
    logits, probs = forward(model, [seq])
    return verdict_from_probs(logits[0], probs[0])


def verdict_from_probs(logits, probs) -> FunctionVerdict:
    cls = 1 if probs[1] > probs[0] else 0  # ties go to benign
    return FunctionVerdict(LABEL_NAMES[cls], float(probs[cls]), (float(logits[0]), float(logits[1])))


def predict(model: ClassifierModel, ids: np.ndarray, batch_size: int = 64):
    """Batched inference over an id matrix; returns (logits, probabilities)."""
    out_l, out_p = [], []
    for i in range(0, len(ids), batch_size):
        l, p = forward(model, ids[i:i + batch_size])
        out_l.append(l)
        out_p.append(p)
    if not out_l:
        return np.zeros((0, 2)), np.zeros((0, 2))
    return np.concatenate(out_l), np.concatenate(out_p)


# -- training -----------------------------------------------------------------

@dataclass
class TrainingReport:
    train_loss: list[float] = field(default_factory=list)
    val_loss: list[float] = field(default_factory=list)
    val_accuracy: list[float] = field(default_factory=list)
    steps: int = 0

    def to_dict(self) -> dict:
        return asdict(self)


class Adam:
    def __init__(self, params: dict[str, np.ndarray], lr=3e-4, beta1=0.9, beta2=0.999, eps=1e-8):
        self.lr, self.beta1, self.beta2, self.eps = lr, beta1, beta2, eps
        self.m = {k: np.zeros_like(v) for k, v in params.items()}
        self.v = {k: np.zeros_like(v) for k, v in params.items()}
        self.t = 0

    def step(self, params, grads) -> None:
        self.t += 1
        b1, b2 = self.beta1, self.beta2
        corr = self.lr * math.sqrt(1 - b2 ** self.t) / (1 - b1 ** self.t)
        for k, g in grads.items():
            m, v = self.m[k], self.v[k]
            m *= b1
            m += (1 - b1) * g
            v *= b2
            v += (1 - b2) * (g * g)
            params[k] -= (corr * m / (np.sqrt(v) + self.eps)).astype(params[k].dtype)


def evaluate_loss(model: ClassifierModel, ids: np.ndarray, labels: np.ndarray,
                  batch_size: int = 64) -> tuple[float, float]:
    """Mean cross-entropy and accuracy over a labelled set."""
    if len(ids) == 0:
        return float("nan"), float("nan")
    _, probs = predict(model, ids, batch_size)
    p_true = probs[np.arange(len(labels)), labels]
    loss = float(-np.mean(np.log(np.maximum(p_true, 1e-300))))
    pred = (probs[:, 1] > probs[:, 0]).astype(np.int64)
    return loss, float(np.mean(pred == labels))


def train(model: ClassifierModel, train_ids: np.ndarray, train_labels: np.ndarray,
          val_ids: np.ndarray | None = None, val_labels: np.ndarray | None = None, *,
          epochs: int = 3, batch_size: int = 16, lr: float = 3e-4, seed: int | None = None,
          log_every: int = 0) -> TrainingReport:
    """Mini-batch Adam on mean cross-entropy. Mutates ``model`` in place."""
    train_ids = _as_ids(train_ids, model.config.max_len)
    train_labels = np.asarray(train_labels, dtype=np.int64)
    if len(train_ids) == 0:
        raise ContractViolation("empty training set")
    if len(np.unique(train_labels)) < 2:
        raise ContractViolation("training set must contain both classes")
    seed = model.config.seed if seed is None else seed
    shuffle_rng = np.random.default_rng([seed, 1])
    dropout_rng = np.random.default_rng([seed, 2])
    opt = Adam(model.params, lr=lr)
    report = TrainingReport()
    n = len(train_ids)
    for epoch in range(epochs):
        order = shuffle_rng.permutation(n)
        total, batches = 0.0, 0
        for start in range(0, n, batch_size):
            idx = order[start:start + batch_size]
            loss, grads = model.loss_and_grads(_trim(train_ids[idx]), train_labels[idx],
                                               training=True, rng=dropout_rng)
            opt.step(model.params, grads)
            total += loss
            batches += 1
            if log_every and opt.t % log_every == 0:
                logger.debug("step %d loss %.4f", opt.t, loss)
        report.train_loss.append(total / batches)
        if val_ids is not None and len(val_ids):
            vl, va = evaluate_loss(model, _as_ids(val_ids, model.config.max_len),
                                   np.asarray(val_labels, dtype=np.int64))
        else:
            vl, va = float("nan"), float("nan")
        report.val_loss.append(vl)
        report.val_accuracy.append(va)
        logger.info("epoch %d: train loss %.4f, val loss %.4f, val acc %.4f",
                    epoch + 1, report.train_loss[-1], vl, va)
    report.steps = opt.t
    model.check()
    return report


# -- gradient check -----------------------------------------------------------

def gradient_check(model: ClassifierModel, ids, labels, n_checks: int = 200,
                   step: float = 1e-5, seed: int = 0, floor: float = 1e-6) -> float:
    """Largest relative error between analytic and central-difference gradients.

    Runs in float64 on a copy of the model with dropout off, over a seeded
    random subsample of parameter entries. The relative error of an entry is
    ``|a - n| / max(|a|, |n|, floor)``; the floor sits above the roundoff of
    the difference quotient, so entries whose true gradient is zero (the key
    bias, for one) do not register as failures.
    """
    m64 = model.astype(np.float64)
    ids = _as_ids(ids, model.config.max_len)
    labels = np.asarray(labels, dtype=np.int64)
    _, grads = m64.loss_and_grads(ids, labels)
    rng = np.random.default_rng(seed)
    names = m64.param_names()
    sizes = np.array([m64.params[n].size for n in names])
    # every tensor gets at least one probe, the rest are spread by size
    picks = [(n, int(rng.integers(m64.params[n].size))) for n in names]
    flat_choice = rng.choice(sizes.sum(), size=max(n_checks - len(names), 0), replace=False)
    offsets = np.concatenate([[0], np.cumsum(sizes)])
    for f in np.sort(flat_choice):
        t = int(np.searchsorted(offsets, f, side="right") - 1)
        picks.append((names[t], int(f - offsets[t])))

    worst = 0.0
    for name, i in picks:
        arr = m64.params[name].reshape(-1)
        orig = arr[i]
        arr[i] = orig + step
        lp, _ = m64.loss_and_grads(ids, labels)
        arr[i] = orig - step
        lm, _ = m64.loss_and_grads(ids, labels)
        arr[i] = orig
        numeric = (lp - lm) / (2 * step)
        analytic = float(grads[name].reshape(-1)[i])
        if not math.isfinite(analytic):
            return float("inf")
        err = abs(analytic - numeric) / max(abs(analytic), abs(numeric), floor)
        worst = max(worst, err)
    return worst


# -- checkpoints --------------------------------------------------------------

def save_checkpoint(model: ClassifierModel, path) -> None:
    """Header-length (uint64 LE) + JSON header + little-endian float32 blob."""
    manifest, offset, chunks = [], 0, []
    for name in model.param_names():
        arr = np.ascontiguousarray(model.params[name], dtype="<f4")
        manifest.append({"name": name, "shape": list(arr.shape), "offset": offset, "nbytes": arr.nbytes})
        offset += arr.nbytes
        chunks.append(arr.tobytes())
    header = json.dumps({"format": "pulse-checkpoint/1", "config": asdict(model.config),
                         "params": manifest}, sort_keys=True, separators=(",", ":")).encode()
    with open(path, "wb") as fh:
        fh.write(CHECKPOINT_MAGIC)
        fh.write(struct.pack("<Q", len(header)))
        fh.write(header)
        for c in chunks:
            fh.write(c)


def load_checkpoint(path) -> ClassifierModel:
    data = Path(path).read_bytes()
    if data[:8] != CHECKPOINT_MAGIC:
        raise ContractViolation(f"{path}: not a checkpoint file")
    (hlen,) = struct.unpack("<Q", data[8:16])
    header = json.loads(data[16:16 + hlen])
    blob = memoryview(data)[16 + hlen:]
    params = {}
    for entry in header["params"]:
        raw = blob[entry["offset"]:entry["offset"] + entry["nbytes"]]
        params[entry["name"]] = np.frombuffer(raw, dtype="<f4").astype(np.float32).reshape(entry["shape"])
    return ClassifierModel(ModelConfig.from_dict(header["config"]), params)
