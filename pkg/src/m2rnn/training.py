"""Desk-scale training: sequence models (embedding + one recurrent core +
linear head), AdamW with warmup+cosine schedule, gradient-norm clipping,
state-tracking and byte-LM loops with deterministic metric streams.
"""

import math
from dataclasses import dataclass, field

import numpy as np

from . import baselines as bl
from . import layer as ml
from . import tasks
from . import tensor_core as tc
from .recurrence import ConfigError

MODEL_KINDS = ("m2rnn", "gru", "vector-rnn", "diag-linear")


class TrainingDiverged(RuntimeError):
    """Loss became non-finite."""


# --- optimizer and schedule ---------------------------------------------------

def adam_init(params):
    """Optimizer state for a name->array parameter dict."""
    return {"step": 0,
            "m": {k: np.zeros_like(v) for k, v in params.items()},
            "v": {k: np.zeros_like(v) for k, v in params.items()}}


def adam_step(params, grads, state, lr, betas=(0.9, 0.999), eps=1e-8,
              weight_decay=0.0, skip_decay=frozenset()):
    """In-place decoupled-weight-decay Adam update.

    Parameters in ``skip_decay`` (norm weights, gate parameters, residual
    weights) are never decayed.
    """
    b1, b2 = betas
    state["step"] += 1
    t = state["step"]
    bc1 = 1.0 - b1 ** t
    bc2 = 1.0 - b2 ** t
    for name, p in params.items():
        g = grads[name]
        m = state["m"][name]
        v = state["v"][name]
        m *= b1
        m += (1.0 - b1) * g
        v *= b2
        v += (1.0 - b2) * (g * g)
        update = (m / bc1) / (np.sqrt(v / bc2) + eps)
        if weight_decay != 0.0 and name not in skip_decay:
            update = update + weight_decay * p
        p -= lr * update


def lr_schedule(step, warmup_steps, total_steps, peak, floor_fraction=0.1):
    """Linear warmup to peak, then cosine decay to floor_fraction * peak."""
    if step < warmup_steps:
        return peak * step / warmup_steps
    if total_steps <= warmup_steps:
        return peak
    floor = floor_fraction * peak
    progress = min(1.0, (step - warmup_steps) / (total_steps - warmup_steps))
    return floor + (peak - floor) * 0.5 * (1.0 + math.cos(math.pi * progress))


def global_grad_norm(grads):
    total = 0.0
    for name in grads:
        total += float(np.sum(grads[name] * grads[name]))
    return math.sqrt(total)


def clip_grads_(grads, max_norm):
    """Scale grads in place to global norm <= max_norm; returns the pre-clip norm."""
    norm = global_grad_norm(grads)
    if max_norm is not None and norm > max_norm:
        scale = max_norm / norm
        for name in grads:
            grads[name] *= scale
    return norm


# --- models --------------------------------------------------------------------

@dataclass
class ModelSpec:
    """Architecture knobs for one sequence model."""
    kind: str
    d_model: int = 32
    n_heads: int = 2
    k_dim: int = 16
    v_dim: int = 8
    hidden: int = 64
    state_clip: float | None = 1.0
    alpha_range: tuple = (1.0, 4.0)
    beta_range: tuple = (0.25, 4.0)
    transition_init: str = "identity"
    embed_std: float = 1.0  # desk-scale single-layer models need O(1) inputs
    proj_std: float | None = None  # None: fan-in scaling 1/sqrt(d_model)

    def __post_init__(self):
        if self.kind not in MODEL_KINDS:
            raise ConfigError(f"unknown model kind {self.kind!r}")


class SequenceModel:
    """Embedding, one recurrent core, and a linear class head."""

    def __init__(self, spec, vocab_size, n_classes, seed):
        self.spec = spec
        self.vocab_size = vocab_size
        self.n_classes = n_classes
        rng = np.random.default_rng(seed)
        d = spec.d_model
        self.params = {}
        self.layer = None
        self.core = None
        if spec.kind == "m2rnn":
            proj_std = spec.proj_std if spec.proj_std is not None else 1.0 / np.sqrt(d)
            self.layer = ml.init_layer_params(
                d, spec.n_heads, spec.k_dim, spec.v_dim,
                seed=rng.integers(2**31), transition_init=spec.transition_init,
                alpha_range=spec.alpha_range, beta_range=spec.beta_range,
                clip=spec.state_clip, proj_std=proj_std)
            core_out = d
            for name, arr in self.layer.named_tensors():
                self.params[f"layer.{name}"] = arr
        elif spec.kind == "gru":
            self.core = bl.init_gru(d, spec.hidden, seed=rng.integers(2**31))
            core_out = spec.hidden
            for name, arr in self.core.named_tensors():
                self.params[f"core.{name}"] = arr
        elif spec.kind == "vector-rnn":
            self.core = bl.init_vector_rnn(d, seed=rng.integers(2**31))
            core_out = d
            for name, arr in self.core.named_tensors():
                self.params[f"core.{name}"] = arr
        else:  # diag-linear
            self.core = bl.init_diag_linear(d, spec.n_heads, spec.k_dim,
                                            spec.v_dim, seed=rng.integers(2**31))
            core_out = spec.n_heads * spec.v_dim
            for name, arr in self.core.named_tensors():
                self.params[f"core.{name}"] = arr
        self.params["embed"] = rng.normal(0.0, spec.embed_std, (vocab_size, d))
        self.params["head_w"] = rng.normal(0.0, 1.0 / np.sqrt(core_out),
                                           (core_out, n_classes))
        self.params["head_b"] = np.zeros(n_classes)

    def skip_decay_names(self):
        return frozenset(n for n in self.params
                         if n in ("layer.rms_weight", "layer.gate_alpha",
                                  "layer.gate_beta", "layer.w_r"))

    def param_count(self):
        return sum(v.size for v in self.params.values())

    def state_size(self):
        s = self.spec
        if s.kind in ("m2rnn", "diag-linear"):
            return s.n_heads * s.k_dim * s.v_dim
        if s.kind == "gru":
            return s.hidden
        return s.d_model

    def forward_train(self, tokens):
        """tokens (B, T) ints -> (logits (B, T, C), cache)."""
        x = self.params["embed"][tokens]
        kind = self.spec.kind
        if kind == "m2rnn":
            o, _, core_cache = ml.layer_forward_train(self.layer, x)
        elif kind == "gru":
            o, core_cache = bl.gru_forward_train(self.core, x)
        elif kind == "vector-rnn":
            o, core_cache = bl.vector_rnn_forward_train(self.core, x)
        else:
            o, core_cache = bl.diag_linear_forward_train(self.core, x)
        b, t, c_out = o.shape
        logits = (tc.matmul(o.reshape(b * t, c_out), self.params["head_w"])
                  + self.params["head_b"]).reshape(b, t, self.n_classes)
        return logits, (tokens, x, o, core_cache)

    def forward(self, tokens):
        logits, _ = self.forward_train(tokens)
        return logits

    def backward(self, cache, dlogits):
        tokens, x, o, core_cache = cache
        b, t, _ = dlogits.shape
        c_out = o.shape[2]
        dl2 = dlogits.reshape(b * t, self.n_classes)
        o2 = o.reshape(b * t, c_out)
        grads = {"head_w": tc.matmul(o2.T, dl2),
                 "head_b": np.sum(dl2, axis=0)}
        do = tc.matmul(dl2, self.params["head_w"].T).reshape(b, t, c_out)
        kind = self.spec.kind
        if kind == "m2rnn":
            core_grads, dx = ml.layer_backward(self.layer, core_cache, do,
                                               clip=self.spec.state_clip)
            grads.update({f"layer.{k}": v for k, v in core_grads.items()})
        elif kind == "gru":
            core_grads, dx = bl.gru_backward(self.core, core_cache, do)
            grads.update({f"core.{k}": v for k, v in core_grads.items()})
        elif kind == "vector-rnn":
            core_grads, dx = bl.vector_rnn_backward(self.core, x, core_cache, do)
            grads.update({f"core.{k}": v for k, v in core_grads.items()})
        else:
            core_grads, dx = bl.diag_linear_backward(self.core, core_cache, do)
            grads.update({f"core.{k}": v for k, v in core_grads.items()})
        dembed = np.zeros_like(self.params["embed"])
        np.add.at(dembed, tokens.reshape(-1), dx.reshape(-1, x.shape[2]))
        grads["embed"] = dembed
        return grads


def softmax_cross_entropy(logits, labels):
    """Mean CE over all positions. Returns (loss, dlogits, accuracy)."""
    shape = logits.shape
    m = shape[0] * (shape[1] if len(shape) == 3 else 1)
    l2 = logits.reshape(m, shape[-1])
    lab = labels.reshape(m)
    mx = np.max(l2, axis=1, keepdims=True)
    e = tc.exp(l2 - mx)
    z = np.sum(e, axis=1, keepdims=True)
    p = e / z
    lse = mx[:, 0] + tc.log(z[:, 0])
    loss = float(np.mean(lse - l2[np.arange(m), lab]))
    dl = p.copy()
    dl[np.arange(m), lab] -= 1.0
    dl /= m
    acc = float(np.mean(np.argmax(l2, axis=1) == lab))
    return loss, dl.reshape(shape), acc


# --- training loops --------------------------------------------------------------

@dataclass
class TrainConfig:
    steps: int = 800
    batch_size: int = 64
    peak_lr: float = 5e-3
    warmup_frac: float = 0.1
    floor_fraction: float = 0.1
    weight_decay: float = 0.1
    grad_clip: float = 1.0
    betas: tuple = (0.9, 0.999)
    adam_eps: float = 1e-8
    log_every: int = 10


@dataclass
class TrainRun:
    """Config, seed, and the (step, split, loss, accuracy, lr, grad_norm)
    metrics stream of one training job."""
    model_kind: str
    seed: int
    config: TrainConfig
    metrics: list = field(default_factory=list)
    model: SequenceModel | None = None

    def metrics_rows(self):
        return [(step, split, loss, acc, lr, gnorm)
                for step, split, loss, acc, lr, gnorm in self.metrics]


def _train_loop(model, cfg, seed, next_batch):
    """Shared optimizer loop; next_batch(step, rng) -> (tokens, labels)."""
    state = adam_init(model.params)
    skip = model.skip_decay_names()
    warmup = max(1, int(cfg.steps * cfg.warmup_frac))
    run = TrainRun(model_kind=model.spec.kind, seed=seed, config=cfg, model=model)
    batch_rng = np.random.default_rng(seed + 0x5EED)
    for step in range(cfg.steps):
        tokens, labels = next_batch(step, batch_rng)
        logits, cache = model.forward_train(tokens)
        loss, dlogits, acc = softmax_cross_entropy(logits, labels)
        if not math.isfinite(loss):
            raise TrainingDiverged(
                f"{model.spec.kind}: non-finite loss {loss} at step {step}")
        grads = model.backward(cache, dlogits)
        gnorm = clip_grads_(grads, cfg.grad_clip)
        lr = lr_schedule(step, warmup, cfg.steps, cfg.peak_lr, cfg.floor_fraction)
        adam_step(model.params, grads, state, lr, cfg.betas, cfg.adam_eps,
                  cfg.weight_decay, skip)
        if step % cfg.log_every == 0 or step == cfg.steps - 1:
            run.metrics.append((step, "train", loss, acc, lr, gnorm))
    return run


def default_spec(model_kind):
    """Desk-scale architecture defaults per model kind."""
    if model_kind == "m2rnn":
        return ModelSpec(kind="m2rnn", d_model=32, n_heads=2, k_dim=16, v_dim=8)
    if model_kind == "gru":
        return ModelSpec(kind="gru", d_model=32, hidden=64)
    if model_kind == "vector-rnn":
        return ModelSpec(kind="vector-rnn", d_model=64)
    return ModelSpec(kind="diag-linear", d_model=32, n_heads=2, k_dim=16, v_dim=8)


def train_state_tracking(model_kind, k, train_len, steps=None, seed=0,
                         spec=None, cfg=None):
    """Train on running-composition prediction over S_k; per-position labels."""
    spec = spec or default_spec(model_kind)
    cfg = cfg or TrainConfig()
    if steps is not None:
        cfg.steps = steps
    order = len(tasks.sk_permutations(k))
    model = SequenceModel(spec, vocab_size=order, n_classes=order, seed=seed)

    def next_batch(step, rng):
        return tasks.gen_sk_batch(k, train_len, cfg.batch_size,
                                  seed=int(rng.integers(2**62)))

    return _train_loop(model, cfg, seed, next_batch)


def evaluate_length_generalization(model, k, lengths, n_samples=512, seed=0):
    """Final-position accuracy on fresh sequences at each length."""
    out = {}
    for i, length in enumerate(lengths):
        tokens, labels = tasks.gen_sk_batch(k, length, n_samples, seed=seed + 7919 * i)
        logits = model.forward(tokens)
        pred = np.argmax(logits[:, -1], axis=1)
        out[length] = float(np.mean(pred == labels[:, -1]))
    return out


def load_corpus_tokens(corpus):
    """Map raw bytes to a dense token alphabet. Returns (data, vocab)."""
    if len(corpus) == 0:
        raise ConfigError("empty corpus")
    raw = np.frombuffer(corpus, dtype=np.uint8)
    vocab = np.unique(raw)
    lut = np.zeros(256, dtype=np.int64)
    lut[vocab] = np.arange(len(vocab))
    return lut[raw], vocab


def train_char_lm(model_kind, corpus, seq_len=64, steps=None, seed=0,
                  spec=None, cfg=None):
    """Next-byte prediction on a raw byte corpus."""
    spec = spec or default_spec(model_kind)
    cfg = cfg or TrainConfig()
    if steps is not None:
        cfg.steps = steps
    data, vocab = load_corpus_tokens(corpus)
    n_vocab = len(vocab)
    if len(data) < seq_len + 2:
        raise ConfigError(f"corpus too short: {len(data)} bytes for seq_len {seq_len}")
    model = SequenceModel(spec, vocab_size=n_vocab, n_classes=n_vocab, seed=seed)

    def next_batch(step, rng):
        starts = rng.integers(0, len(data) - seq_len - 1, size=cfg.batch_size)
        idx = starts[:, None] + np.arange(seq_len + 1)[None, :]
        window = data[idx]
        return window[:, :-1], window[:, 1:]

    return _train_loop(model, cfg, seed, next_batch)
