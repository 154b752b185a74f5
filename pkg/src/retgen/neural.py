"""GRU encoder-decoder reply generators with from-scratch backpropagation.

Two architectures share all machinery here:

* ``seq2seq``: one query encoder, an affine bridge, a GRU decoder with a
  softmax output layer.
* ``biseq2seq``: a second encoder reads the retrieved reply; the bridge
  projects the concatenated final states of both encoders to the decoder's
  initial hidden state.

The three networks (two encoders, one decoder) never share parameters,
including embedding tables.  All training math runs in float64; checkpoints
are stored as float32.
"""

from __future__ import annotations

import copy
import json
import logging
from dataclasses import dataclass, field
from pathlib import Path

import numpy as np

from .corpus import BOS_ID, EOS_ID, PAD_ID

logger = logging.getLogger(__name__)

CHECKPOINT_FORMAT_VERSION = 1
INIT_SCALE = 0.08
PROB_FLOOR = 1e-12

SEQ2SEQ = "seq2seq"
BISEQ2SEQ = "biseq2seq"


class TrainingDivergedError(RuntimeError):
    """Raised when the loss becomes non-finite during training."""


class ClampCounter:
    """Counts how often a predicted probability had to be floored."""

    def __init__(self) -> None:
        self.count = 0

    def bump(self, n: int) -> None:
        if n:
            self.count += n
            logger.debug("clamped %d zero probabilities at the loss", n)

    def reset(self) -> None:
        self.count = 0


clamp_counter = ClampCounter()


# ---------------------------------------------------------------------------
# Parameters
# ---------------------------------------------------------------------------

@dataclass
class GruParams:
    """Gate and candidate-state weights of one GRU cell.

    ``w_in_*`` are input-to-hidden (embed_dim × hidden_dim), ``w_hh_*``
    hidden-to-hidden (hidden_dim × hidden_dim).  The candidate state carries
    no bias; only the reset and update gates do.
    """

    w_in_r: np.ndarray
    w_in_z: np.ndarray
    w_in_c: np.ndarray
    w_hh_r: np.ndarray
    w_hh_z: np.ndarray
    w_hh_c: np.ndarray
    b_r: np.ndarray
    b_z: np.ndarray


@dataclass
class EncoderParams:
    emb: np.ndarray  # (vocab, embed_dim)
    gru: GruParams


@dataclass
class DecoderParams:
    emb: np.ndarray       # (vocab, embed_dim)
    gru: GruParams
    w_out: np.ndarray     # (vocab, hidden_dim)
    b_out: np.ndarray     # (vocab,)


@dataclass
class BridgeParams:
    w: np.ndarray  # (hidden_dim, hidden_dim) or (2*hidden_dim, hidden_dim)
    b: np.ndarray  # (hidden_dim,)


@dataclass
class Hyper:
    arch: str
    embed_dim: int
    hidden_dim: int
    enc_vocab_size: int
    dec_vocab_size: int
    seed: int
    vocab_files: dict = field(default_factory=dict)


@dataclass
class Seq2SeqModel:
    hyper: Hyper
    enc_q: EncoderParams
    bridge: BridgeParams
    dec: DecoderParams


@dataclass
class BiSeq2SeqModel:
    hyper: Hyper
    enc_q: EncoderParams
    enc_r: EncoderParams
    bridge: BridgeParams
    dec: DecoderParams


Model = Seq2SeqModel | BiSeq2SeqModel


def _gru_param_names() -> list[str]:
    return ["w_in_r", "w_in_z", "w_in_c", "w_hh_r", "w_hh_z", "w_hh_c", "b_r", "b_z"]


def param_items(model: Model) -> list[tuple[str, np.ndarray]]:
    """Every parameter tensor with a stable dotted name, in a fixed order.

    This order defines checkpoint payload layout and initialization draws.
    """
    items: list[tuple[str, np.ndarray]] = []

    def add_encoder(prefix: str, enc: EncoderParams) -> None:
        items.append((f"{prefix}.emb", enc.emb))
        for name in _gru_param_names():
            items.append((f"{prefix}.{name}", getattr(enc.gru, name)))

    add_encoder("enc_q", model.enc_q)
    if isinstance(model, BiSeq2SeqModel):
        add_encoder("enc_r", model.enc_r)
    items.append(("bridge.w", model.bridge.w))
    items.append(("bridge.b", model.bridge.b))
    items.append(("dec.emb", model.dec.emb))
    for name in _gru_param_names():
        items.append((f"dec.{name}", getattr(model.dec.gru, name)))
    items.append(("dec.w_out", model.dec.w_out))
    items.append(("dec.b_out", model.dec.b_out))
    return items


def _catalog(arch: str, embed_dim: int, hidden_dim: int,
             enc_vocab: int, dec_vocab: int) -> list[tuple[str, tuple[int, ...]]]:
    e, h = embed_dim, hidden_dim

    def gru(prefix: str) -> list[tuple[str, tuple[int, ...]]]:
        return [
            (f"{prefix}.w_in_r", (e, h)), (f"{prefix}.w_in_z", (e, h)),
            (f"{prefix}.w_in_c", (e, h)), (f"{prefix}.w_hh_r", (h, h)),
            (f"{prefix}.w_hh_z", (h, h)), (f"{prefix}.w_hh_c", (h, h)),
            (f"{prefix}.b_r", (h,)), (f"{prefix}.b_z", (h,)),
        ]

    cat = [("enc_q.emb", (enc_vocab, e))] + gru("enc_q")
    if arch == BISEQ2SEQ:
        cat += [("enc_r.emb", (enc_vocab, e))] + gru("enc_r")
    bridge_in = 2 * h if arch == BISEQ2SEQ else h
    cat += [("bridge.w", (bridge_in, h)), ("bridge.b", (h,))]
    cat += [("dec.emb", (dec_vocab, e))] + gru("dec")
    cat += [("dec.w_out", (dec_vocab, h)), ("dec.b_out", (dec_vocab,))]
    return cat


def init_model(
    arch: str,
    embed_dim: int,
    hidden_dim: int,
    enc_vocab_size: int,
    dec_vocab_size: int,
    seed: int = 0,
    vocab_files: dict | None = None,
) -> Model:
    """Fresh model with uniform(-0.08, 0.08) matrices and zero biases."""
    if arch not in (SEQ2SEQ, BISEQ2SEQ):
        raise ValueError(f"unknown architecture {arch!r}")
    rng = np.random.default_rng(seed)
    tensors: dict[str, np.ndarray] = {}
    for name, shape in _catalog(arch, embed_dim, hidden_dim, enc_vocab_size, dec_vocab_size):
        if name.endswith((".b_r", ".b_z", "bridge.b", "dec.b_out")):
            tensors[name] = np.zeros(shape)
        else:
            tensors[name] = rng.uniform(-INIT_SCALE, INIT_SCALE, shape)

    def gru(prefix: str) -> GruParams:
        return GruParams(**{n: tensors[f"{prefix}.{n}"] for n in _gru_param_names()})

    hyper = Hyper(arch, embed_dim, hidden_dim, enc_vocab_size, dec_vocab_size,
                  seed, vocab_files or {})
    enc_q = EncoderParams(tensors["enc_q.emb"], gru("enc_q"))
    bridge = BridgeParams(tensors["bridge.w"], tensors["bridge.b"])
    dec = DecoderParams(tensors["dec.emb"], gru("dec"),
                        tensors["dec.w_out"], tensors["dec.b_out"])
    if arch == BISEQ2SEQ:
        return BiSeq2SeqModel(hyper, enc_q, EncoderParams(tensors["enc_r.emb"], gru("enc_r")),
                              bridge, dec)
    return Seq2SeqModel(hyper, enc_q, bridge, dec)


# ---------------------------------------------------------------------------
# Forward primitives
# ---------------------------------------------------------------------------

def _sigmoid(x: np.ndarray) -> np.ndarray:
    out = np.empty_like(x)
    pos = x >= 0
    out[pos] = 1.0 / (1.0 + np.exp(-x[pos]))
    ex = np.exp(x[~pos])
    out[~pos] = ex / (1.0 + ex)
    return out


def gru_step(p: GruParams, x: np.ndarray, h_prev: np.ndarray) -> np.ndarray:
    """One GRU step.  Works on single vectors and on (batch, dim) arrays.

    reset gate r, update gate z, candidate state c:
        r = σ(x·W_in_r + h·W_hh_r + b_r)
        z = σ(x·W_in_z + h·W_hh_z + b_z)
        c = tanh(x·W_in_c + (r∘h)·W_hh_c)
        h' = (1−z)∘h + z∘c
    """
    if x.shape[-1] != p.w_in_r.shape[0] or h_prev.shape[-1] != p.w_hh_r.shape[0]:
        raise ValueError(
            f"shape mismatch: x {x.shape}, h {h_prev.shape} vs "
            f"W_in {p.w_in_r.shape}, W_hh {p.w_hh_r.shape}"
        )
    r = _sigmoid(x @ p.w_in_r + h_prev @ p.w_hh_r + p.b_r)
    z = _sigmoid(x @ p.w_in_z + h_prev @ p.w_hh_z + p.b_z)
    c = np.tanh(x @ p.w_in_c + (r * h_prev) @ p.w_hh_c)
    return (1.0 - z) * h_prev + z * c


def _gru_step_cached(p: GruParams, x, h_prev):
    r = _sigmoid(x @ p.w_in_r + h_prev @ p.w_hh_r + p.b_r)
    z = _sigmoid(x @ p.w_in_z + h_prev @ p.w_hh_z + p.b_z)
    c = np.tanh(x @ p.w_in_c + (r * h_prev) @ p.w_hh_c)
    h = (1.0 - z) * h_prev + z * c
    return h, (x, h_prev, r, z, c)


def encode_sequence(enc: EncoderParams, ids: list[int]) -> np.ndarray:
    """Run the encoder GRU over ``ids`` from a zero state; final hidden state."""
    if not ids:
        raise ValueError("cannot encode an empty id sequence")
    h = np.zeros(enc.gru.w_hh_r.shape[0])
    for i in ids:
        h = gru_step(enc.gru, enc.emb[i], h)
    return h


def apply_bridge(model: Model, q_vec: np.ndarray, r_vec: np.ndarray | None = None) -> np.ndarray:
    """Affine map from encoder state(s) to the decoder's initial state."""
    if isinstance(model, BiSeq2SeqModel):
        if r_vec is None:
            raise ValueError("biseq2seq bridge requires the retrieved-reply encoding")
        inp = np.concatenate([q_vec, r_vec], axis=-1)
    else:
        inp = q_vec
    if inp.shape[-1] != model.bridge.w.shape[0]:
        raise ValueError(f"bridge input {inp.shape} does not match {model.bridge.w.shape}")
    return inp @ model.bridge.w + model.bridge.b


def softmax(logits: np.ndarray) -> np.ndarray:
    """Max-subtracted softmax over the last axis."""
    if not np.all(np.isfinite(logits)):
        raise ValueError("softmax requires finite logits")
    shifted = logits - np.max(logits, axis=-1, keepdims=True)
    ex = np.exp(shifted)
    return ex / np.sum(ex, axis=-1, keepdims=True)


def cross_entropy(prob_seqs: list[np.ndarray], target_ids: list[int]) -> float:
    """Summed negative log-probability of each target under its distribution."""
    if len(prob_seqs) != len(target_ids):
        raise ValueError("one probability vector per target token required")
    total = 0.0
    clamped = 0
    for probs, tid in zip(prob_seqs, target_ids):
        if tid < 0 or tid >= probs.shape[-1]:
            raise ValueError(f"target id {tid} out of range")
        p = probs[tid]
        if p < PROB_FLOOR:
            p = PROB_FLOOR
            clamped += 1
        total -= float(np.log(p))
    clamp_counter.bump(clamped)
    return total


# ---------------------------------------------------------------------------
# Batched forward/backward
# ---------------------------------------------------------------------------

Triple = tuple[list[int], list[int] | None, list[int]]


def _check_triples(model: Model, triples: list[Triple]) -> None:
    bi = isinstance(model, BiSeq2SeqModel)
    for q_ids, r_ids, t_ids in triples:
        if not q_ids:
            raise ValueError("empty query id sequence")
        if bi and not r_ids:
            raise ValueError("biseq2seq requires retrieved-reply ids for every sample")
        if len(t_ids) < 2 or t_ids[0] != BOS_ID or t_ids[-1] != EOS_ID:
            raise ValueError("target ids must be framed with BOS ... EOS")


def _pad(seqs: list[list[int]]) -> tuple[np.ndarray, np.ndarray]:
    """Right-pad with PAD; returns int ids (B, T) and float mask (B, T)."""
    max_len = max(len(s) for s in seqs)
    ids = np.full((len(seqs), max_len), PAD_ID, dtype=np.int64)
    mask = np.zeros((len(seqs), max_len))
    for i, s in enumerate(seqs):
        ids[i, : len(s)] = s
        mask[i, : len(s)] = 1.0
    return ids, mask


def _run_encoder(enc: EncoderParams, ids: np.ndarray, mask: np.ndarray):
    """Masked batched encoder pass: rows freeze once their sequence ends."""
    batch, steps = ids.shape
    h = np.zeros((batch, enc.gru.w_hh_r.shape[0]))
    caches = []
    for t in range(steps):
        x = enc.emb[ids[:, t]]
        h_new, cache = _gru_step_cached(enc.gru, x, h)
        m = mask[:, t][:, None]
        h_out = m * h_new + (1.0 - m) * h
        caches.append((cache, h, m))
        h = h_out
    return h, caches


def _forward_batch(model: Model, triples: list[Triple]):
    """Forward pass over a padded batch; returns loss, token count, cache."""
    _check_triples(model, triples)
    bi = isinstance(model, BiSeq2SeqModel)

    q_ids, q_mask = _pad([t[0] for t in triples])
    q_vec, q_caches = _run_encoder(model.enc_q, q_ids, q_mask)
    if bi:
        r_ids, r_mask = _pad([t[1] for t in triples])
        r_vec, r_caches = _run_encoder(model.enc_r, r_ids, r_mask)
        bridge_in = np.concatenate([q_vec, r_vec], axis=-1)
    else:
        r_ids = r_mask = r_caches = None
        bridge_in = q_vec
    h0 = bridge_in @ model.bridge.w + model.bridge.b

    dec_in, _ = _pad([t[2][:-1] for t in triples])
    dec_out, d_mask = _pad([t[2][1:] for t in triples])

    batch, steps = dec_in.shape
    h = h0
    dec_caches = []
    probs_all = np.empty((batch, steps, model.dec.w_out.shape[0]))
    for t in range(steps):
        x = model.dec.emb[dec_in[:, t]]
        h, cache = _gru_step_cached(model.dec.gru, x, h)
        logits = h @ model.dec.w_out.T + model.dec.b_out
        # no finiteness check here: a diverged model must surface as NaN
        # loss so the trainer can abort with a diagnostic
        shifted = logits - np.max(logits, axis=-1, keepdims=True)
        ex = np.exp(shifted)
        probs_all[:, t, :] = ex / np.sum(ex, axis=-1, keepdims=True)
        dec_caches.append((cache, h))

    picked = probs_all[np.arange(batch)[:, None], np.arange(steps)[None, :], dec_out]
    floored = (picked < PROB_FLOOR) & (d_mask > 0)
    clamp_counter.bump(int(floored.sum()))
    loss = float(-(np.log(np.maximum(picked, PROB_FLOOR)) * d_mask).sum())
    n_tokens = float(d_mask.sum())

    cache = {
        "q_ids": q_ids, "q_mask": q_mask, "q_caches": q_caches, "q_vec": q_vec,
        "r_ids": r_ids, "r_mask": r_mask, "r_caches": r_caches,
        "bridge_in": bridge_in, "dec_in": dec_in, "dec_out": dec_out,
        "d_mask": d_mask, "dec_caches": dec_caches, "probs": probs_all,
    }
    return loss, n_tokens, cache


def _zero_grads(model: Model) -> dict[str, np.ndarray]:
    return {name: np.zeros_like(arr) for name, arr in param_items(model)}


def _backprop_gru_step(gru: GruParams, grads: dict, prefix: str, cache, dh_new):
    """Gradient of one cached GRU step.  Returns (dx, dh_prev)."""
    x, h_prev, r, z, c = cache
    dz = dh_new * (c - h_prev)
    dc = dh_new * z
    dh_prev = dh_new * (1.0 - z)

    da_c = dc * (1.0 - c * c)
    grads[f"{prefix}.w_in_c"] += x.T @ da_c
    rh = r * h_prev
    grads[f"{prefix}.w_hh_c"] += rh.T @ da_c
    d_rh = da_c @ gru.w_hh_c.T
    dr = d_rh * h_prev
    dh_prev += d_rh * r

    da_z = dz * z * (1.0 - z)
    grads[f"{prefix}.w_in_z"] += x.T @ da_z
    grads[f"{prefix}.w_hh_z"] += h_prev.T @ da_z
    grads[f"{prefix}.b_z"] += da_z.sum(axis=0)
    dh_prev += da_z @ gru.w_hh_z.T

    da_r = dr * r * (1.0 - r)
    grads[f"{prefix}.w_in_r"] += x.T @ da_r
    grads[f"{prefix}.w_hh_r"] += h_prev.T @ da_r
    grads[f"{prefix}.b_r"] += da_r.sum(axis=0)
    dh_prev += da_r @ gru.w_hh_r.T

    dx = da_c @ gru.w_in_c.T + da_z @ gru.w_in_z.T + da_r @ gru.w_in_r.T
    return dx, dh_prev


def _backprop_encoder(enc: EncoderParams, grads: dict, prefix: str,
                      ids: np.ndarray, caches, d_final: np.ndarray) -> None:
    dh = d_final
    for t in range(ids.shape[1] - 1, -1, -1):
        cache, h_prev_masked, m = caches[t]
        dh_new = dh * m
        dh_skip = dh * (1.0 - m)
        dx, dh_prev = _backprop_gru_step(enc.gru, grads, prefix, cache, dh_new)
        np.add.at(grads[f"{prefix}.emb"], ids[:, t], dx)
        dh = dh_prev + dh_skip


def forward_backward(model: Model, triples: list[Triple]):
    """Total batch loss, token count, and exact gradients for every tensor."""
    loss, n_tokens, cache = _forward_batch(model, triples)
    grads = _zero_grads(model)

    probs = cache["probs"]
    dec_out, d_mask = cache["dec_out"], cache["d_mask"]
    batch, steps, _ = probs.shape

    # Softmax + cross-entropy: dlogits = probs - onehot(target), masked.
    dlogits_all = probs.copy()
    dlogits_all[np.arange(batch)[:, None], np.arange(steps)[None, :], dec_out] -= 1.0
    dlogits_all *= d_mask[:, :, None]

    dh = np.zeros((batch, model.hyper.hidden_dim))
    dec_in = cache["dec_in"]
    for t in range(steps - 1, -1, -1):
        gru_cache, h_t = cache["dec_caches"][t]
        dlogits = dlogits_all[:, t, :]
        grads["dec.w_out"] += dlogits.T @ h_t
        grads["dec.b_out"] += dlogits.sum(axis=0)
        dh = dh + dlogits @ model.dec.w_out
        dx, dh = _backprop_gru_step(model.dec.gru, grads, "dec", gru_cache, dh)
        np.add.at(grads["dec.emb"], dec_in[:, t], dx)

    # dh is now the gradient at the decoder's initial state = bridge output.
    grads["bridge.w"] += cache["bridge_in"].T @ dh
    grads["bridge.b"] += dh.sum(axis=0)
    d_bridge_in = dh @ model.bridge.w.T

    if isinstance(model, BiSeq2SeqModel):
        hid = model.hyper.hidden_dim
        _backprop_encoder(model.enc_q, grads, "enc_q", cache["q_ids"],
                          cache["q_caches"], d_bridge_in[:, :hid])
        _backprop_encoder(model.enc_r, grads, "enc_r", cache["r_ids"],
                          cache["r_caches"], d_bridge_in[:, hid:])
    else:
        _backprop_encoder(model.enc_q, grads, "enc_q", cache["q_ids"],
                          cache["q_caches"], d_bridge_in)
    return loss, n_tokens, grads


def backward(model: Model, triples: list[Triple]) -> dict[str, np.ndarray]:
    """Gradients of the total batch loss with respect to every parameter."""
    return forward_backward(model, triples)[2]


def forward_loss(model: Model, q_ids: list[int], rstar_ids: list[int] | None,
                 target_ids: list[int]) -> tuple[float, np.ndarray]:
    """Teacher-forced loss of one sample plus its per-token log-probabilities."""
    loss, _, cache = _forward_batch(model, [(q_ids, rstar_ids, target_ids)])
    probs = cache["probs"][0]
    targets = np.asarray(target_ids[1:])
    picked = probs[np.arange(len(targets)), targets]
    return loss, np.log(np.maximum(picked, PROB_FLOOR))


def batch_loss(model: Model, triples: list[Triple]) -> tuple[float, float]:
    """Loss and target-token count without gradients (evaluation path)."""
    loss, n_tokens, _ = _forward_batch(model, triples)
    return loss, n_tokens


# ---------------------------------------------------------------------------
# AdaDelta
# ---------------------------------------------------------------------------

@dataclass
class AdaDeltaState:
    rho: float
    eps: float
    eg2: dict[str, np.ndarray]
    edx2: dict[str, np.ndarray]


def adadelta_init(model: Model, rho: float = 0.95, eps: float = 1e-6) -> AdaDeltaState:
    zeros = lambda: {name: np.zeros_like(arr) for name, arr in param_items(model)}
    return AdaDeltaState(rho=rho, eps=eps, eg2=zeros(), edx2=zeros())


def adadelta_update(state: AdaDeltaState, params: dict[str, np.ndarray],
                    grads: dict[str, np.ndarray]) -> None:
    """In-place AdaDelta step on every parameter tensor.

        E[g²] ← ρE[g²] + (1−ρ)g²
        Δx    = −(√(E[Δx²]+ε) / √(E[g²]+ε)) · g
        E[Δx²]← ρE[Δx²] + (1−ρ)Δx²
        x     ← x + Δx
    """
    rho, eps = state.rho, state.eps
    for name, x in params.items():
        g = grads[name]
        eg2 = state.eg2[name]
        edx2 = state.edx2[name]
        eg2 *= rho
        eg2 += (1.0 - rho) * g * g
        dx = -np.sqrt(edx2 + eps) / np.sqrt(eg2 + eps) * g
        edx2 *= rho
        edx2 += (1.0 - rho) * dx * dx
        x += dx


# ---------------------------------------------------------------------------
# Training loop
# ---------------------------------------------------------------------------

@dataclass
class TrainConfig:
    batch_size: int = 16
    max_epochs: int = 300
    rho: float = 0.95
    eps: float = 1e-6
    patience: int = 10
    seed: int = 0


@dataclass
class EpochStats:
    epoch: int
    train_loss: float        # mean loss per target token
    val_perplexity: float


@dataclass
class TrainResult:
    history: list[EpochStats]
    best_epoch: int
    stopped_early: bool


def perplexity(model: Model, triples: list[Triple], batch_size: int = 64) -> float:
    """exp(total cross-entropy / total target-token count)."""
    if not triples:
        raise ValueError("perplexity requires a non-empty triple list")
    total_loss = 0.0
    total_tokens = 0.0
    for start in range(0, len(triples), batch_size):
        loss, n_tokens = batch_loss(model, triples[start:start + batch_size])
        total_loss += loss
        total_tokens += n_tokens
    return float(np.exp(total_loss / total_tokens))


def _snapshot(params: dict[str, np.ndarray]) -> dict[str, np.ndarray]:
    return {name: arr.copy() for name, arr in params.items()}


def _restore(params: dict[str, np.ndarray], snapshot: dict[str, np.ndarray]) -> None:
    for name, arr in params.items():
        arr[...] = snapshot[name]


def train(model: Model, triples: list[Triple], val_triples: list[Triple],
          config: TrainConfig) -> tuple[Model, TrainResult]:
    """Mini-batched AdaDelta with perplexity-based early stopping.

    Shuffling is seeded per run; the returned model carries the parameters
    of the best-validation epoch.
    """
    if not triples or not val_triples:
        raise ValueError("training and validation sets must be non-empty")
    _check_triples(model, triples)
    _check_triples(model, val_triples)

    rng = np.random.default_rng(config.seed)
    params = dict(param_items(model))
    state = adadelta_init(model, rho=config.rho, eps=config.eps)

    history: list[EpochStats] = []
    best_ppl = np.inf
    best_epoch = 0
    best_params = _snapshot(params)
    bad_epochs = 0
    stopped_early = False

    for epoch in range(1, config.max_epochs + 1):
        order = rng.permutation(len(triples))
        epoch_loss = 0.0
        epoch_tokens = 0.0
        for start in range(0, len(order), config.batch_size):
            batch = [triples[i] for i in order[start:start + config.batch_size]]
            loss, n_tokens, grads = forward_backward(model, batch)
            if not np.isfinite(loss):
                raise TrainingDivergedError(
                    f"non-finite loss at epoch {epoch}, batch starting at {start}"
                )
            adadelta_update(state, params, grads)
            epoch_loss += loss
            epoch_tokens += n_tokens

        val_ppl = perplexity(model, val_triples, batch_size=config.batch_size)
        history.append(EpochStats(epoch=epoch, train_loss=epoch_loss / epoch_tokens,
                                  val_perplexity=val_ppl))
        if val_ppl < best_ppl:
            best_ppl = val_ppl
            best_epoch = epoch
            best_params = _snapshot(params)
            bad_epochs = 0
        else:
            bad_epochs += 1
            if bad_epochs > config.patience:
                stopped_early = True
                break

    _restore(params, best_params)
    return model, TrainResult(history=history, best_epoch=best_epoch,
                              stopped_early=stopped_early)


# ---------------------------------------------------------------------------
# Decoding
# ---------------------------------------------------------------------------

def _decoder_start(model: Model, q_ids: list[int], rstar_ids: list[int] | None) -> np.ndarray:
    q_vec = encode_sequence(model.enc_q, q_ids)
    if isinstance(model, BiSeq2SeqModel):
        if not rstar_ids:
            raise ValueError("biseq2seq generation requires retrieved-reply ids")
        r_vec = encode_sequence(model.enc_r, rstar_ids)
        return apply_bridge(model, q_vec, r_vec)
    return apply_bridge(model, q_vec)


def _log_softmax(logits: np.ndarray) -> np.ndarray:
    shifted = logits - np.max(logits)
    return shifted - np.log(np.sum(np.exp(shifted)))


def _greedy(model: Model, h0: np.ndarray, max_len: int) -> list[int]:
    h = h0
    token = BOS_ID
    out: list[int] = []
    for _ in range(max_len):
        h = gru_step(model.dec.gru, model.dec.emb[token], h)
        logits = model.dec.w_out @ h + model.dec.b_out
        token = int(np.argmax(logits))  # argmax takes the lowest id on ties
        if token == EOS_ID:
            break
        out.append(token)
    return out


def _beam(model: Model, h0: np.ndarray, max_len: int, width: int) -> list[int]:
    # Hypothesis: (ids, h, sum_logp, finished); ranked by mean log-prob,
    # ties broken by the lexicographically smaller id sequence.
    hyps = [((), h0, 0.0, False)]

    def mean_lp(hyp):
        ids, _, slp, _ = hyp
        return slp / max(1, len(ids))

    for _ in range(max_len):
        if all(h[3] for h in hyps):
            break
        cands = []
        for ids, h, slp, finished in hyps:
            if finished:
                cands.append((ids, h, slp, True))
                continue
            prev = ids[-1] if ids else BOS_ID
            h2 = gru_step(model.dec.gru, model.dec.emb[prev], h)
            logp = _log_softmax(model.dec.w_out @ h2 + model.dec.b_out)
            top = sorted(range(len(logp)), key=lambda t: (-logp[t], t))[:width]
            for tok in top:
                cands.append((ids + (tok,), h2, slp + float(logp[tok]), tok == EOS_ID))
        cands.sort(key=lambda c: (-(c[2] / max(1, len(c[0]))), c[0]))
        hyps = cands[:width]

    best = min(hyps, key=lambda c: (-mean_lp(c), c[0]))
    ids = list(best[0])
    if ids and ids[-1] == EOS_ID:
        ids.pop()
    return ids


def generate(model: Model, q_ids: list[int], rstar_ids: list[int] | None = None,
             max_len: int = 20, beam_width: int = 1) -> list[int]:
    """Decode a reply for ``q_ids``; greedy when ``beam_width`` is 1.

    Beam search ranks hypotheses by mean log-probability.  Output ids carry
    no BOS/EOS framing.  Deterministic for fixed inputs.
    """
    if max_len < 1:
        raise ValueError("max_len must be at least 1")
    if beam_width < 1:
        raise ValueError("beam_width must be at least 1")
    h0 = _decoder_start(model, q_ids, rstar_ids)
    if beam_width == 1:
        return _greedy(model, h0, max_len)
    return _beam(model, h0, max_len, beam_width)


# ---------------------------------------------------------------------------
# Checkpoints
# ---------------------------------------------------------------------------

def save_checkpoint(model: Model, prefix: str | Path) -> tuple[Path, Path]:
    """Write ``<prefix>.json`` (manifest) and ``<prefix>.bin`` (float32 payload).

    The payload is raw little-endian IEEE-754 32-bit floats in catalog
    order; the manifest records names, shapes, and byte offsets.
    """
    prefix = Path(prefix)
    manifest_path = prefix.with_suffix(".json")
    payload_path = prefix.with_suffix(".bin")

    tensors = []
    chunks = []
    offset = 0
    for name, arr in param_items(model):
        data = arr.astype("<f4").tobytes()
        tensors.append({"name": name, "shape": list(arr.shape), "offset": offset})
        chunks.append(data)
        offset += len(data)

    h = model.hyper
    manifest = {
        "version": CHECKPOINT_FORMAT_VERSION,
        "architecture": h.arch,
        "embed_dim": h.embed_dim,
        "hidden_dim": h.hidden_dim,
        "encoder_vocab_size": h.enc_vocab_size,
        "decoder_vocab_size": h.dec_vocab_size,
        "seed": h.seed,
        "vocab_files": h.vocab_files,
        "payload": payload_path.name,
        "tensors": tensors,
    }
    manifest_path.write_text(
        json.dumps(manifest, ensure_ascii=False, sort_keys=True, separators=(",", ":")) + "\n",
        encoding="utf-8",
    )
    payload_path.write_bytes(b"".join(chunks))
    return manifest_path, payload_path


def load_checkpoint(manifest_path: str | Path) -> Model:
    """Rebuild a model (float64 tensors) from a manifest + payload pair."""
    manifest_path = Path(manifest_path)
    manifest = json.loads(manifest_path.read_text(encoding="utf-8"))
    if manifest.get("version") != CHECKPOINT_FORMAT_VERSION:
        raise ValueError(f"unsupported checkpoint version in {manifest_path}")

    model = init_model(
        manifest["architecture"],
        manifest["embed_dim"],
        manifest["hidden_dim"],
        manifest["encoder_vocab_size"],
        manifest["decoder_vocab_size"],
        seed=manifest.get("seed", 0),
        vocab_files=manifest.get("vocab_files", {}),
    )
    payload = (manifest_path.parent / manifest["payload"]).read_bytes()
    params = dict(param_items(model))
    seen = set()
    for entry in manifest["tensors"]:
        name, shape, offset = entry["name"], tuple(entry["shape"]), entry["offset"]
        if name not in params:
            raise ValueError(f"unknown tensor {name!r} in {manifest_path}")
        arr = params[name]
        if arr.shape != shape:
            raise ValueError(f"tensor {name!r}: manifest shape {shape} vs model {arr.shape}")
        count = int(np.prod(shape)) if shape else 1
        flat = np.frombuffer(payload, dtype="<f4", count=count, offset=offset)
        arr[...] = flat.reshape(shape).astype(np.float64)
        seen.add(name)
    missing = set(params) - seen
    if missing:
        raise ValueError(f"checkpoint {manifest_path} is missing tensors: {sorted(missing)}")
    return model


def clone_model(model: Model) -> Model:
    """Deep copy; the copy shares no arrays with the original."""
    return copy.deepcopy(model)
