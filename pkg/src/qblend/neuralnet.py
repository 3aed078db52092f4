"""Minimal differentiable compute for the critic networks.

The only architecture family here is: per-field token embedding -> gated
recurrent encoder -> concatenation of final hidden states -> two affine
layers with a tanh between them -> scalar. Reverse-mode gradients are written
out by hand for exactly this family; there is no general autodiff graph.

Everything runs in float64. Forward and backward are pure functions of
(params, inputs): no hidden state survives a call, and batch reductions sum
in fixed index order, so results are bitwise reproducible.

Parameters live in flat ``dict[str, ndarray]`` maps with dotted names
(``enc.<field>.w_r``, ``head.lin1.w``, ...) so the optimizer, checkpoints and
gradient checks can treat every network uniformly.
"""

from __future__ import annotations

import json
import math
import zlib
from dataclasses import dataclass, replace
from functools import lru_cache

import numpy as np

from .errors import DataFormatError, NumericError
from .seeding import generator

CHECKPOINT_VERSION = 1

# Gate weight names of one recurrent encoder, in canonical order.
_ENC_KEYS = ("emb", "w_r", "w_z", "w_n", "u_r", "u_z", "u_n", "b_r", "b_z", "b_n")


def tokenize(text: str, vocab_size: int) -> list[int]:
    """Case-fold, whitespace-split, and hash each token into [0, vocab_size).

    Uses crc32, which is stable across runs and platforms. Empty or
    whitespace-only text yields an empty list.
    """
    if vocab_size < 2:
        raise ValueError("vocab_size must be >= 2")
    return [_token_id(tok, vocab_size) for tok in text.lower().split()]


@lru_cache(maxsize=1 << 16)
def _token_id(token: str, vocab_size: int) -> int:
    return zlib.crc32(token.encode("utf-8")) % vocab_size


@lru_cache(maxsize=1 << 16)
def tokenize_cached(text: str, vocab_size: int) -> tuple[int, ...]:
    return tuple(tokenize(text, vocab_size))


@dataclass(frozen=True)
class NetConfig:
    """Shape of one scalar text network: which fields it encodes and the dims."""

    fields: tuple[str, ...]
    vocab_size: int = 8192
    embed_dim: int = 64
    hidden_dim: int = 128

    def param_shapes(self) -> dict[str, tuple[int, ...]]:
        v, e, h = self.vocab_size, self.embed_dim, self.hidden_dim
        shapes: dict[str, tuple[int, ...]] = {}
        for field in self.fields:
            p = f"enc.{field}."
            shapes[p + "emb"] = (v, e)
            for k in ("w_r", "w_z", "w_n"):
                shapes[p + k] = (h, e)
            for k in ("u_r", "u_z", "u_n"):
                shapes[p + k] = (h, h)
            for k in ("b_r", "b_z", "b_n"):
                shapes[p + k] = (h,)
        concat = len(self.fields) * h
        shapes["head.lin1.w"] = (h, concat)
        shapes["head.lin1.b"] = (h,)
        shapes["head.lin2.w"] = (1, h)
        shapes["head.lin2.b"] = (1,)
        return shapes


def _fan_in(name: str, shape: tuple[int, ...], cfg: NetConfig) -> int:
    if name.endswith(".emb"):
        return cfg.embed_dim
    if len(shape) == 2:
        return shape[1]
    # biases adopt the fan-in of their layer
    if ".lin1." in name:
        return len(cfg.fields) * cfg.hidden_dim
    if ".lin2." in name:
        return cfg.hidden_dim
    return cfg.hidden_dim


def init_params(cfg: NetConfig, seed: int) -> dict[str, np.ndarray]:
    """Uniform init in [-1/sqrt(fan_in), +1/sqrt(fan_in)], one stream per tensor."""
    params = {}
    for name, shape in cfg.param_shapes().items():
        bound = 1.0 / math.sqrt(_fan_in(name, shape, cfg))
        rng = generator(seed, "init", name)
        params[name] = rng.uniform(-bound, bound, size=shape)
    return params


def _sigmoid(x: np.ndarray) -> np.ndarray:
    # exp overflow for very negative inputs saturates to exactly 0, which is fine
    with np.errstate(over="ignore"):
        return 1.0 / (1.0 + np.exp(-x))


def _encoder_slice(params: dict[str, np.ndarray], field: str) -> dict[str, np.ndarray]:
    prefix = f"enc.{field}."
    return {k: params[prefix + k] for k in _ENC_KEYS}


@lru_cache(maxsize=4096)
def _padded_batch(seqs: tuple[tuple[int, ...], ...], vocab: int):
    """Pad a tuple of token sequences to (ids, mask); cached and read-only."""
    batch = len(seqs)
    max_len = max((len(s) for s in seqs), default=0)
    ids = np.zeros((batch, max_len), dtype=np.intp)
    mask = np.zeros((batch, max_len))
    for i, seq in enumerate(seqs):
        for t, tok in enumerate(seq):
            if not 0 <= tok < vocab:
                raise ValueError(f"token id {tok} out of range [0, {vocab})")
            ids[i, t] = tok
        mask[i, : len(seq)] = 1.0
    ids.setflags(write=False)
    mask.setflags(write=False)
    return ids, mask


def _gru_padded_forward(enc: dict[str, np.ndarray], ids: np.ndarray, mask: np.ndarray,
                        need_tape: bool = True):
    """The recurrence over an already-padded batch; optionally records a tape.

    Right padding is masked: once a sequence ends its hidden state is carried
    through unchanged, so the returned row equals the last valid hidden state.
    Empty sequences return the zero initial state. Gate weights are applied as
    one stacked matmul per step (order r, z, n).
    """
    hidden = enc["b_r"].shape[0]
    batch, max_len = ids.shape

    h = np.zeros((batch, hidden))
    if not max_len:
        return h, {"ids": ids, "mask": mask, "tape": None}

    w_all = np.concatenate([enc["w_r"], enc["w_z"], enc["w_n"]], axis=0)
    u_all = np.concatenate([enc["u_r"], enc["u_z"], enc["u_n"]], axis=0)
    b_all = np.concatenate([enc["b_r"], enc["b_z"], enc["b_n"]])
    xs = enc["emb"][ids]  # [B, T, E]
    gx = xs.reshape(batch * max_len, -1) @ w_all.T + b_all
    gx = gx.reshape(batch, max_len, 3 * hidden)

    if not need_tape:
        for t in range(max_len):
            gh = h @ u_all.T
            rz = _sigmoid(gx[:, t, : 2 * hidden] + gh[:, : 2 * hidden])
            z = rz[:, hidden:]
            n = np.tanh(gx[:, t, 2 * hidden:] + rz[:, :hidden] * gh[:, 2 * hidden:])
            m = mask[:, t : t + 1]
            h = m * (z * h + (1.0 - z) * n) + (1.0 - m) * h
        return h, {"ids": ids, "mask": mask, "tape": None}

    h_prev = np.empty((batch, max_len, hidden))
    rz_all = np.empty((batch, max_len, 2 * hidden))
    uh_all = np.empty((batch, max_len, hidden))
    n_all = np.empty((batch, max_len, hidden))
    for t in range(max_len):
        gh = h @ u_all.T
        rz = _sigmoid(gx[:, t, : 2 * hidden] + gh[:, : 2 * hidden])
        r = rz[:, :hidden]
        z = rz[:, hidden:]
        uh = gh[:, 2 * hidden:]
        n = np.tanh(gx[:, t, 2 * hidden:] + r * uh)
        m = mask[:, t : t + 1]
        h_new = z * h + (1.0 - z) * n
        h_prev[:, t] = h
        rz_all[:, t] = rz
        uh_all[:, t] = uh
        n_all[:, t] = n
        h = m * h_new + (1.0 - m) * h
    tape = {"xs": xs, "h_prev": h_prev, "rz": rz_all, "uh": uh_all, "n": n_all,
            "u_all": u_all, "w_all": w_all}
    return h, {"ids": ids, "mask": mask, "tape": tape}


def gru_forward_batch(enc: dict[str, np.ndarray], seqs: list[tuple[int, ...]]):
    """Pad a list of token sequences and run the recurrence (see above)."""
    ids, mask = _padded_batch(tuple(seqs), enc["emb"].shape[0])
    return _gru_padded_forward(enc, ids, mask)


def gru_backward_batch(enc: dict[str, np.ndarray], cache: dict, dh: np.ndarray):
    """Backprop through the recurrence; returns grads keyed like the encoder."""
    grads = {k: np.zeros_like(enc[k]) for k in _ENC_KEYS}
    tape = cache["tape"]
    if tape is None:
        return grads
    ids, mask = cache["ids"], cache["mask"]
    batch, max_len = ids.shape
    hidden = enc["b_r"].shape[0]

    d_gx = np.empty((batch, max_len, 3 * hidden))
    d_gh = np.empty((batch, max_len, 3 * hidden))
    dh = dh.copy()
    for t in range(max_len - 1, -1, -1):
        r = tape["rz"][:, t, :hidden]
        z = tape["rz"][:, t, hidden:]
        n = tape["n"][:, t]
        uh = tape["uh"][:, t]
        h_prev = tape["h_prev"][:, t]
        m = mask[:, t : t + 1]

        dh_new = dh * m
        dh_prev = dh * (1.0 - m)
        dz = dh_new * (h_prev - n)
        dn = dh_new * (1.0 - z)
        dh_prev += dh_new * z

        dan = dn * (1.0 - n * n)
        dar = (dan * uh) * r * (1.0 - r)
        daz = dz * z * (1.0 - z)
        duh = dan * r

        d_gx[:, t, :hidden] = dar
        d_gx[:, t, hidden : 2 * hidden] = daz
        d_gx[:, t, 2 * hidden :] = dan
        d_gh[:, t, :hidden] = dar
        d_gh[:, t, hidden : 2 * hidden] = daz
        d_gh[:, t, 2 * hidden :] = duh

        dh = dh_prev + d_gh[:, t] @ tape["u_all"]

    flat_gx = d_gx.reshape(batch * max_len, 3 * hidden)
    flat_gh = d_gh.reshape(batch * max_len, 3 * hidden)
    d_w_all = flat_gx.T @ tape["xs"].reshape(batch * max_len, -1)
    d_u_all = flat_gh.T @ tape["h_prev"].reshape(batch * max_len, hidden)
    d_b_all = flat_gx.sum(axis=0)
    grads["w_r"], grads["w_z"], grads["w_n"] = np.split(d_w_all, 3, axis=0)
    grads["u_r"], grads["u_z"], grads["u_n"] = np.split(d_u_all, 3, axis=0)
    grads["b_r"], grads["b_z"], grads["b_n"] = np.split(d_b_all, 3)

    d_xs = flat_gx @ tape["w_all"]
    valid = mask > 0
    np.add.at(grads["emb"], ids[valid], d_xs.reshape(batch, max_len, -1)[valid])
    return grads


def gru_encode(enc: dict[str, np.ndarray], tokens) -> np.ndarray:
    """Final hidden state for a single token sequence (zero state if empty)."""
    h, _ = gru_forward_batch(enc, [tuple(tokens)])
    return h[0]


class CompiledBatch:
    """Batch preparation (dedupe + padding) hoisted out of the forward pass.

    Gradient checks evaluate the same batch thousands of times under
    perturbed parameters; compiling once removes all per-call Python prep.
    """

    def __init__(self, cfg: NetConfig, samples: list[dict[str, tuple[int, ...]]]):
        self.size = len(samples)
        self.fields = []
        for field in cfg.fields:
            uniq: dict[tuple[int, ...], int] = {}
            inverse = np.empty(self.size, dtype=np.intp)
            for i, sample in enumerate(samples):
                inverse[i] = uniq.setdefault(sample[field], len(uniq))
            ids, mask = _padded_batch(tuple(uniq), cfg.vocab_size)
            self.fields.append((ids, mask, inverse, len(uniq)))


class TextScalarNet:
    """One scalar-valued network over a fixed set of text fields.

    Samples are dicts mapping each config field to a token-id tuple. Repeated
    sequences within a batch are encoded once and scattered back, which is
    exact (gradients for duplicates sum into the shared encoding).
    """

    def __init__(self, cfg: NetConfig, params: dict[str, np.ndarray]):
        self.cfg = cfg
        self.params = params

    @classmethod
    def create(cls, cfg: NetConfig, seed: int) -> "TextScalarNet":
        return cls(cfg, init_params(cfg, seed))

    def prepare(self, texts: dict[str, str]) -> dict[str, tuple[int, ...]]:
        return {f: tokenize_cached(texts[f], self.cfg.vocab_size) for f in self.cfg.fields}

    def compile_batch(self, samples) -> CompiledBatch:
        return CompiledBatch(self.cfg, samples)

    def forward(self, samples, need_cache: bool = True):
        """Returns (values [B], cache) for the batch (list or CompiledBatch)."""
        compiled = samples if isinstance(samples, CompiledBatch) else CompiledBatch(self.cfg, samples)
        field_h = []
        field_caches = []
        for field, (ids, mask, inverse, n_uniq) in zip(self.cfg.fields, compiled.fields):
            h_u, cache = _gru_padded_forward(_encoder_slice(self.params, field), ids, mask,
                                             need_tape=need_cache)
            field_h.append(h_u[inverse])
            field_caches.append((cache, inverse, n_uniq))
        concat = np.concatenate(field_h, axis=1)
        z1 = concat @ self.params["head.lin1.w"].T + self.params["head.lin1.b"]
        a1 = np.tanh(z1)  # smooth activation keeps gradients kink-free
        out = a1 @ self.params["head.lin2.w"].T + self.params["head.lin2.b"]
        cache = {"field_caches": field_caches, "concat": concat, "a1": a1}
        return out[:, 0], cache

    def value_batch(self, samples) -> np.ndarray:
        return self.forward(samples)[0]

    def value(self, sample) -> float:
        return float(self.value_batch([sample])[0])

    def backward(self, cache, dvalues: np.ndarray) -> dict[str, np.ndarray]:
        """Gradients of sum(dvalues * outputs) w.r.t. every parameter."""
        h = self.cfg.hidden_dim
        d2 = np.asarray(dvalues, dtype=float)[:, None]
        grads = {
            "head.lin2.w": d2.T @ cache["a1"],
            "head.lin2.b": d2.sum(axis=0),
        }
        da1 = d2 @ self.params["head.lin2.w"]
        dz1 = da1 * (1.0 - cache["a1"] ** 2)
        grads["head.lin1.w"] = dz1.T @ cache["concat"]
        grads["head.lin1.b"] = dz1.sum(axis=0)
        dconcat = dz1 @ self.params["head.lin1.w"]
        for k, field in enumerate(self.cfg.fields):
            enc_cache, inverse, n_uniq = cache["field_caches"][k]
            dh = dconcat[:, k * h : (k + 1) * h]
            dh_u = np.zeros((n_uniq, h))
            np.add.at(dh_u, inverse, dh)
            enc_grads = gru_backward_batch(_encoder_slice(self.params, field), enc_cache, dh_u)
            for key, g in enc_grads.items():
                grads[f"enc.{field}.{key}"] = g
        return grads


@dataclass(frozen=True)
class LossResult:
    value: float
    grads: dict[str, np.ndarray]
    per_sample: np.ndarray | None = None


@dataclass(frozen=True)
class AdamState:
    """First/second moment accumulators plus the shared step counter."""

    m: dict[str, np.ndarray]
    v: dict[str, np.ndarray]
    step: int = 0
    lr: float = 3e-4
    beta1: float = 0.9
    beta2: float = 0.999
    eps: float = 1e-8


def adam_init(params: dict[str, np.ndarray], lr: float = 3e-4, beta1: float = 0.9,
              beta2: float = 0.999, eps: float = 1e-8) -> AdamState:
    zeros = {k: np.zeros_like(p) for k, p in params.items()}
    return AdamState(m=zeros, v={k: np.zeros_like(p) for k, p in params.items()},
                     step=0, lr=lr, beta1=beta1, beta2=beta2, eps=eps)


def adam_update(params: dict[str, np.ndarray], grads: dict[str, np.ndarray],
                state: AdamState) -> tuple[dict[str, np.ndarray], AdamState]:
    """One bias-corrected adaptive step; missing grads are treated as zero."""
    t = state.step + 1
    new_params, new_m, new_v = {}, {}, {}
    for name in params:
        g = grads.get(name)
        if g is None:
            g = np.zeros_like(params[name])
        elif g.shape != params[name].shape:
            raise ValueError(f"gradient shape {g.shape} != param shape {params[name].shape} for {name}")
        m = state.beta1 * state.m[name] + (1.0 - state.beta1) * g
        v = state.beta2 * state.v[name] + (1.0 - state.beta2) * g * g
        m_hat = m / (1.0 - state.beta1 ** t)
        v_hat = v / (1.0 - state.beta2 ** t)
        new_params[name] = params[name] - state.lr * m_hat / (np.sqrt(v_hat) + state.eps)
        new_m[name] = m
        new_v[name] = v
    return new_params, replace(state, m=new_m, v=new_v, step=t)


def adam_update_inplace(params: dict[str, np.ndarray], grads: dict[str, np.ndarray],
                        state: AdamState) -> AdamState:
    """Mutating twin of :func:`adam_update` (identical arithmetic, no copies).

    Training loops use this to avoid reallocating every parameter each batch;
    results are bitwise equal to the functional version.
    """
    t = state.step + 1
    for name in params:
        g = grads.get(name)
        if g is None:
            g = np.zeros_like(params[name])
        elif g.shape != params[name].shape:
            raise ValueError(f"gradient shape {g.shape} != param shape {params[name].shape} for {name}")
        m = state.m[name]
        v = state.v[name]
        m *= state.beta1
        m += (1.0 - state.beta1) * g
        v *= state.beta2
        v += (1.0 - state.beta2) * g * g
        m_hat = m / (1.0 - state.beta1 ** t)
        v_hat = v / (1.0 - state.beta2 ** t)
        params[name] -= state.lr * m_hat / (np.sqrt(v_hat) + state.eps)
    return replace(state, step=t)


def compute_gradients(loss_fn, params: dict[str, np.ndarray], batch) -> dict[str, np.ndarray]:
    """Evaluate ``loss_fn(params, batch) -> LossResult`` and return its grads.

    Loss functions take a ``need_grads`` keyword so value-only probes (as in
    the finite-difference check) can skip the backward pass. Raises
    NumericError when the loss is non-finite, naming the first offending
    batch index when per-sample losses are available.
    """
    result = loss_fn(params, batch)
    if not math.isfinite(result.value):
        where = ""
        if result.per_sample is not None:
            bad = np.flatnonzero(~np.isfinite(result.per_sample))
            if bad.size:
                where = f" (batch index {int(bad[0])})"
        raise NumericError(f"non-finite loss {result.value}{where}")
    return result.grads


def finite_diff_check(loss_fn, params: dict[str, np.ndarray], batch, h: float = 1e-4) -> float:
    """Max relative error between analytic grads and central differences.

    Relative error uses max(|analytic|, |fd|, 1e-8) as the denominator. The
    check perturbs parameters in place and restores them afterwards.
    """
    if not 0.0 < h <= 1e-2:
        raise ValueError("h must be in (0, 1e-2]")
    analytic = loss_fn(params, batch).grads
    worst = 0.0
    for name in sorted(params):
        arr = params[name]
        grad = analytic.get(name)
        if grad is None:
            grad = np.zeros_like(arr)
        flat = arr.reshape(-1)
        gflat = np.asarray(grad).reshape(-1)
        for i in range(flat.size):
            orig = flat[i]
            flat[i] = orig + h
            up = loss_fn(params, batch, need_grads=False).value
            flat[i] = orig - h
            down = loss_fn(params, batch, need_grads=False).value
            flat[i] = orig
            fd = (up - down) / (2.0 * h)
            err = abs(gflat[i] - fd) / max(abs(gflat[i]), abs(fd), 1e-8)
            worst = max(worst, err)
    return worst


def squared_output_loss(net: TextScalarNet):
    """Probe loss mean(net(x)^2), used by gradient checks over whole networks."""

    def loss_fn(params: dict[str, np.ndarray], batch, need_grads: bool = True) -> LossResult:
        probe = TextScalarNet(net.cfg, params)
        values, cache = probe.forward(batch, need_cache=need_grads)
        size = batch.size if isinstance(batch, CompiledBatch) else len(batch)
        per_sample = values**2
        grads = probe.backward(cache, 2.0 * values / size) if need_grads else {}
        return LossResult(float(per_sample.mean()), grads, per_sample)

    return loss_fn


def save_checkpoint(path, params: dict[str, np.ndarray], *, architecture_id: str,
                    vocab_size: int, embed_dim: int, hidden_dim: int, seed: int) -> None:
    """Write the versioned text checkpoint: header plus name -> {shape, data}."""
    doc = {
        "format_version": CHECKPOINT_VERSION,
        "architecture_id": architecture_id,
        "vocab_size": vocab_size,
        "embed_dim": embed_dim,
        "hidden_dim": hidden_dim,
        "seed": seed,
        "params": {
            name: {"shape": list(arr.shape), "data": arr.reshape(-1).tolist()}
            for name, arr in sorted(params.items())
        },
    }
    with open(path, "w", encoding="utf-8") as fh:
        json.dump(doc, fh, sort_keys=True, separators=(",", ":"))
        fh.write("\n")


def load_checkpoint(path) -> tuple[dict, dict[str, np.ndarray]]:
    """Read a checkpoint; returns (header, params). Shape mismatches raise."""
    with open(path, "r", encoding="utf-8") as fh:
        try:
            doc = json.load(fh)
        except json.JSONDecodeError as exc:
            raise DataFormatError(f"invalid checkpoint JSON ({exc.msg})", exc.lineno) from exc
    for key in ("format_version", "architecture_id", "vocab_size", "embed_dim", "hidden_dim", "seed", "params"):
        if key not in doc:
            raise DataFormatError(f"checkpoint missing header field {key!r}")
    if doc["format_version"] != CHECKPOINT_VERSION:
        raise DataFormatError(f"unsupported checkpoint version {doc['format_version']}")
    params = {}
    for name, entry in doc["params"].items():
        arr = np.asarray(entry["data"], dtype=float)
        shape = tuple(entry["shape"])
        expected = 1
        for dim in shape:
            expected *= dim
        if arr.size != expected:
            raise DataFormatError(f"parameter {name}: data length {arr.size} != shape {shape}")
        params[name] = arr.reshape(shape)
    header = {k: doc[k] for k in doc if k != "params"}
    return header, params
