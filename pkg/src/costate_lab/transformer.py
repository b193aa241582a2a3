"""Tiny pre-LN causal transformer with exposed hidden states and a binary checkpoint.

Two forward paths share the same parameters:

* ``forward_batch``: full sequences (B, T) at once with a causal mask; used for
  pretraining, GRPO and reward evaluation.
* ``Stepper``: one position at a time, every (position, layer) hidden state a
  separate tape node.  Analyses that need d h_k / d h_t go through this path.
"""

import hashlib
import io
import json
import math
import struct
from dataclasses import asdict, dataclass, field

import numpy as np

from . import autodiff as ad
from .rng import gumbel

MAGIC = b"CSL1"


class CheckpointError(ValueError):
    pass


class FingerprintMismatch(CheckpointError):
    pass


@dataclass(frozen=True)
class ModelConfig:
    n_layers: int = 2
    d_model: int = 32
    n_heads: int = 2
    d_head: int = 16
    vocab_size: int = 16
    max_seq_len: int = 24
    ln_eps: float = 1e-5
    init_scale: float = 0.02
    embed_init: float = 1.0

    def __post_init__(self):
        if self.n_heads * self.d_head != self.d_model:
            raise ValueError("n_heads * d_head must equal d_model")
        if self.vocab_size < 2:
            raise ValueError("vocab_size must be at least 2")
        if self.n_layers < 1 or self.max_seq_len < 1:
            raise ValueError("n_layers and max_seq_len must be positive")

    @property
    def d_attn(self):
        return self.n_heads * self.d_head

    def to_dict(self):
        return asdict(self)

    @classmethod
    def from_dict(cls, d):
        return cls(**d)

    def fingerprint(self):
        blob = json.dumps(self.to_dict(), sort_keys=True, separators=(",", ":")).encode()
        return hashlib.sha256(blob).digest()


def param_layout(cfg):
    d, V, da = cfg.d_model, cfg.vocab_size, cfg.d_attn
    lay = [("wte", (V, d)), ("wpe", (cfg.max_seq_len, d))]
    for l in range(cfg.n_layers):
        p = f"h{l}."
        lay += [
            (p + "ln1_g", (d,)), (p + "ln1_b", (d,)),
            (p + "w_qkv", (d, 3 * da)), (p + "b_qkv", (3 * da,)),
            (p + "w_o", (da, d)), (p + "b_o", (d,)),
            (p + "ln2_g", (d,)), (p + "ln2_b", (d,)),
            (p + "w_1", (d, 4 * d)), (p + "b_1", (4 * d,)),
            (p + "w_2", (4 * d, d)), (p + "b_2", (d,)),
        ]
    lay += [("lnf_g", (d,)), ("lnf_b", (d,)), ("head", (d, V)), ("head_b", (V,))]
    return lay


def _offsets(layout):
    out, off = {}, 0
    for name, shape in layout:
        n = int(np.prod(shape))
        out[name] = (off, off + n, shape)
        off += n
    return out, off


@dataclass
class Checkpoint:
    config: ModelConfig
    params: np.ndarray
    pretrain_step: int = 0
    rng_state: dict = field(default_factory=dict)

    def __post_init__(self):
        self.params = np.ascontiguousarray(self.params, dtype=np.float64)
        _, total = _offsets(param_layout(self.config))
        if self.params.shape != (total,):
            raise CheckpointError(f"expected {total} parameters, got {self.params.shape}")

    @property
    def fingerprint(self):
        return self.config.fingerprint()

    def arrays(self):
        """Named read-only views into the flat parameter vector."""
        offs, _ = _offsets(param_layout(self.config))
        out = {}
        for name, (a, b, shape) in offs.items():
            v = self.params[a:b].reshape(shape)
            v.flags.writeable = False
            out[name] = v
        return out

    def with_params(self, params, step=None):
        return Checkpoint(self.config, np.array(params, dtype=np.float64),
                          self.pretrain_step if step is None else step, dict(self.rng_state))

    def with_array(self, name, value):
        """Copy with the named parameter array replaced."""
        a, b, shape = _offsets(param_layout(self.config))[0][name]
        p = self.params.copy()
        p[a:b] = np.broadcast_to(np.asarray(value, dtype=np.float64), shape).reshape(-1)
        return self.with_params(p)


def init_checkpoint(cfg, rng):
    lay = param_layout(cfg)
    parts = []
    for name, shape in lay:
        leaf = name.split(".")[-1]
        if leaf.endswith("_g"):
            parts.append(np.ones(shape))
        elif leaf.startswith("b") or leaf.endswith("_b"):
            parts.append(np.zeros(shape))
        elif name in ("wte", "wpe"):
            parts.append(cfg.embed_init * rng.standard_normal(shape))
        else:
            parts.append(cfg.init_scale * rng.standard_normal(shape))
    return Checkpoint(cfg, np.concatenate([p.reshape(-1) for p in parts]), 0)


def save_checkpoint(ckpt, path):
    manifest = json.dumps(
        {
            "config": ckpt.config.to_dict(),
            "layout": [[n, list(s)] for n, s in param_layout(ckpt.config)],
            "rng_state": ckpt.rng_state,
        },
        sort_keys=True,
    ).encode()
    buf = io.BytesIO()
    buf.write(MAGIC)
    buf.write(ckpt.fingerprint)
    buf.write(struct.pack("<QQ", int(ckpt.pretrain_step), ckpt.params.size))
    buf.write(ckpt.params.astype("<f8").tobytes())
    buf.write(struct.pack("<Q", len(manifest)))
    buf.write(manifest)
    with open(path, "wb") as fh:
        fh.write(buf.getvalue())


def load_checkpoint(path):
    with open(path, "rb") as fh:
        blob = fh.read()
    head = 4 + 32 + 16
    if len(blob) < head or blob[:4] != MAGIC:
        raise CheckpointError(f"{path}: not a checkpoint or truncated header")
    fp = blob[4:36]
    step, count = struct.unpack("<QQ", blob[36:52])
    end = head + 8 * count
    if len(blob) < end + 8:
        raise CheckpointError(f"{path}: truncated parameter block")
    params = np.frombuffer(blob, dtype="<f8", count=count, offset=head).astype(np.float64)
    (mlen,) = struct.unpack("<Q", blob[end : end + 8])
    if len(blob) < end + 8 + mlen:
        raise CheckpointError(f"{path}: truncated manifest")
    manifest = json.loads(blob[end + 8 : end + 8 + mlen].decode())
    cfg = ModelConfig.from_dict(manifest["config"])
    if cfg.fingerprint() != fp:
        raise FingerprintMismatch(f"{path}: config fingerprint does not match header")
    return Checkpoint(cfg, params, step, manifest.get("rng_state", {}))


# ------------------------------------------------------------------ params


def bind(ckpt, tape=None):
    """Parameters as tensors: tape leaves when ``tape`` is given, constants otherwise."""
    arrs = ckpt.arrays()
    if tape is None:
        return {k: ad.Tensor(v) for k, v in arrs.items()}
    return {k: tape.leaf(v, k) for k, v in arrs.items()}


def flat_grad(grads, P, cfg):
    return np.concatenate([np.asarray(grads[P[name]]).reshape(-1) for name, _ in param_layout(cfg)])


def entropy(logits, temperature=1.0):
    """Entropy in nats of softmax(logits / temperature) along the last axis."""
    z = np.asarray(logits, dtype=np.float64) / temperature
    z = z - z.max(axis=-1, keepdims=True)
    lse = np.log(np.exp(z).sum(axis=-1, keepdims=True))
    logp = z - lse
    return -(np.exp(logp) * logp).sum(axis=-1)


def _ln(x, P, name, eps):
    return ad.layernorm(x, P[name + "_g"], P[name + "_b"], eps)


def _mlp(x, P, p, eps):
    a = _ln(x, P, p + "ln2", eps)
    return ad.gelu(a @ P[p + "w_1"] + P[p + "b_1"]) @ P[p + "w_2"] + P[p + "b_2"]


def logits_from_hidden(h, P, cfg):
    return _ln(h, P, "lnf", cfg.ln_eps) @ P["head"] + P["head_b"]


def embed(P, tokens):
    tokens = np.asarray(tokens)
    T = tokens.shape[-1]
    return ad.gather_rows(P["wte"], tokens) + P["wpe"][:T]


# ----------------------------------------------------------- batched forward


@dataclass
class BatchOutput:
    logits: ad.Tensor  # (B, T, V)
    hidden: list  # n_layers + 1 tensors of shape (B, T, d)
    attn: list  # n_layers arrays (B, H, T, T)


def forward_batch(P, cfg, tokens=None, embeds=None):
    """Causal forward over whole sequences; ``embeds`` (B, T, d) replaces token+position input."""
    x = embed(P, tokens) if embeds is None else embeds
    B, T, d = x.shape
    if T > cfg.max_seq_len:
        raise ad.ShapeError(f"sequence length {T} exceeds max_seq_len {cfg.max_seq_len}")
    H, dh, da = cfg.n_heads, cfg.d_head, cfg.d_attn
    mask = np.tril(np.ones((T, T), dtype=bool))
    scale = 1.0 / math.sqrt(dh)
    hidden, attn = [x], []
    for l in range(cfg.n_layers):
        p = f"h{l}."
        a = _ln(x, P, p + "ln1", cfg.ln_eps)
        qkv = a @ P[p + "w_qkv"] + P[p + "b_qkv"]
        q = qkv[..., :da].reshape(B, T, H, dh).transpose(0, 2, 1, 3)
        k = qkv[..., da : 2 * da].reshape(B, T, H, dh).transpose(0, 2, 3, 1)
        v = qkv[..., 2 * da :].reshape(B, T, H, dh).transpose(0, 2, 1, 3)
        w = ad.softmax((q @ k) * scale, mask=mask)
        attn.append(w.data)
        o = (w @ v).transpose(0, 2, 1, 3).reshape(B, T, da)
        x = x + (o @ P[p + "w_o"] + P[p + "b_o"])
        x = x + _mlp(x, P, p, cfg.ln_eps)
        hidden.append(x)
    return BatchOutput(logits_from_hidden(x, P, cfg), hidden, attn)


def sequence_logprobs(P, cfg, tokens, temperature=1.0):
    """log pi(tokens[:, j+1] | tokens[:, :j+1]) for j = 0..T-2, shape (B, T-1), plus logits."""
    tokens = np.asarray(tokens)
    out = forward_batch(P, cfg, tokens)
    z = out.logits if temperature == 1.0 else out.logits * (1.0 / temperature)
    lp = ad.log_softmax(z[:, :-1])
    return ad.pick(lp, tokens[:, 1:]), out


# --------------------------------------------------------- incremental path


class Stepper:
    """Position-by-position forward; keeps every h_t^{(l)} as its own node.

    ``blocked`` lists positions that later queries may not attend to.
    ``perturb`` maps (t, layer) to an additive offset on h_t^{(layer)}.
    """

    def __init__(self, P, cfg, blocked=(), perturb=None):
        self.P, self.cfg = P, cfg
        self.blocked = set(blocked)
        self.perturb = perturb or {}
        self.k = [[] for _ in range(cfg.n_layers)]
        self.v = [[] for _ in range(cfg.n_layers)]
        self.h = []  # h[t][l], l = 0..L
        self.logits = []  # (1, V) tensors
        self.attn = []  # attn[t][l]: (H, t+1) arrays

    def __len__(self):
        return len(self.h)

    def push(self, x0):
        """Feed the input vector (1, d) for the next position; returns its logits."""
        cfg, P = self.cfg, self.P
        t = len(self.h)
        if t >= cfg.max_seq_len:
            raise ad.ShapeError(f"position {t} exceeds max_seq_len {cfg.max_seq_len}")
        H, dh, da = cfg.n_heads, cfg.d_head, cfg.d_attn
        allowed = np.array([j == t or j not in self.blocked for j in range(t + 1)])
        mask = None if allowed.all() else allowed[None, None, :]
        scale = 1.0 / math.sqrt(dh)
        if (t, 0) in self.perturb:
            x0 = x0 + self.perturb[(t, 0)]
        x = x0
        hs, att_t = [x0], []
        for l in range(cfg.n_layers):
            p = f"h{l}."
            a = _ln(x, P, p + "ln1", cfg.ln_eps)
            qkv = a @ P[p + "w_qkv"] + P[p + "b_qkv"]
            q = qkv[:, :da].reshape(H, 1, dh)
            self.k[l].append(qkv[:, da : 2 * da].reshape(H, dh))
            self.v[l].append(qkv[:, 2 * da :].reshape(H, dh))
            K = ad.stack(self.k[l], axis=2)  # (H, dh, t+1)
            V = ad.stack(self.v[l], axis=1)  # (H, t+1, dh)
            w = ad.softmax((q @ K) * scale, mask=mask)  # (H, 1, t+1)
            att_t.append(w.data[:, 0, :])
            o = (w @ V).reshape(1, da)
            x = x + (o @ P[p + "w_o"] + P[p + "b_o"])
            x = x + _mlp(x, P, p, cfg.ln_eps)
            if (t, l + 1) in self.perturb:
                x = x + self.perturb[(t, l + 1)]
            hs.append(x)
        z = logits_from_hidden(x, P, cfg)
        self.h.append(hs)
        self.logits.append(z)
        self.attn.append(att_t)
        return z


def token_input(P, token, pos):
    return P["wte"][int(token) : int(token) + 1] + P["wpe"][pos : pos + 1]


def soft_input(P, z, pos, tau, mode="soft", hard_token=None, stop=False):
    """Input at ``pos`` built from logits ``z`` (1, V) of the previous position.

    mode ``soft``: softmax(z/tau) @ E.  mode ``st``: value of the hard token
    embedding with the gradient of the soft one.  ``stop`` detaches the soft
    part, leaving only the token-fixed pathway.
    """
    p = ad.softmax(z * (1.0 / tau))
    e = p @ P["wte"]
    if mode == "st":
        hard = P["wte"][int(hard_token) : int(hard_token) + 1]
        e = hard + (e - ad.stop_gradient(e))
    elif mode != "soft":
        raise ValueError(f"unknown relaxation mode {mode!r}")
    if stop:
        e = ad.stop_gradient(e)
    return e + P["wpe"][pos : pos + 1]


@dataclass
class HiddenTrace:
    tokens: np.ndarray  # all tokens fed (prefix + generated)
    n_prefix: int
    hidden: list  # hidden[t][l] tensors (1, d)
    logits: list  # (1, V) tensors per position
    attn: list  # attn[t][l] (H, t+1)
    entropy: np.ndarray  # per position, nats
    logprob: list  # per action position: tensor scalar l_t for the token sampled there
    action_positions: np.ndarray  # positions whose logits produced a sampled token
    gumbel: np.ndarray
    tape: ad.Tape = None
    params: dict = None
    config: ModelConfig = None
    temperature: float = 1.0

    @property
    def T(self):
        return len(self.hidden)

    def h(self, t, layer=-1):
        return self.hidden[t][layer]

    def z(self, t):
        return self.logits[t].data[0]


def _logprob_node(z, token, temperature):
    zz = z if temperature == 1.0 else z * (1.0 / temperature)
    return ad.pick(ad.log_softmax(zz), [int(token)]).sum()


def run_trace(P, cfg, tokens, n_prefix, tape=None, temperature=1.0, relax_from=None, tau=1.0,
              relax_mode="soft", stop_soft=False, blocked=(), gumbel_noise=None, input_override=None,
              perturb=None):
    """Replay a fixed token sequence through the stepper.

    Inputs at positions j > relax_from (j >= n_prefix) are soft embeddings of
    the logits at j-1 instead of the token embedding.  ``input_override`` maps a
    position to a (1, d) tensor used as its input.
    """
    tokens = np.asarray(tokens, dtype=np.int64)
    st = Stepper(P, cfg, blocked, perturb)
    for j, tok in enumerate(tokens):
        if input_override is not None and j in input_override:
            x0 = input_override[j]
        elif relax_from is not None and j >= n_prefix and j - 1 >= relax_from:
            x0 = soft_input(P, st.logits[j - 1], j, tau, relax_mode, tok, stop_soft)
        else:
            x0 = token_input(P, tok, j)
        st.push(x0)
    return _make_trace(st, tokens, n_prefix, tape, P, cfg, temperature, gumbel_noise)


def _make_trace(st, tokens, n_prefix, tape, P, cfg, temperature, gnoise):
    T = len(tokens)
    acts = np.arange(n_prefix - 1, T - 1) if n_prefix >= 1 else np.arange(0, T - 1)
    lps = [_logprob_node(st.logits[t], tokens[t + 1], temperature) for t in acts]
    ent = np.array([entropy(z.data[0], temperature) for z in st.logits])
    return HiddenTrace(tokens, n_prefix, st.h, st.logits, st.attn, ent, lps, acts, gnoise,
                       tape, P, cfg, temperature)


def forward(checkpoint, prefix, generate_n, temperature=1.0, rng=None, tape=None, params=None):
    """Autoregressive generation with every hidden state on ``tape`` (a fresh one if None).

    Sampling is Gumbel-max on logits / temperature with noise drawn up front, so
    a replay with the same noise reproduces the tokens.
    """
    cfg = checkpoint.config
    prefix = [int(t) for t in prefix]
    if temperature <= 0:
        raise ValueError("temperature must be positive")
    if len(prefix) + generate_n > cfg.max_seq_len:
        raise ad.ShapeError("prefix + generate_n exceeds max_seq_len")
    if not prefix:
        raise ValueError("prefix must contain at least one token")
    tape = ad.Tape() if tape is None else tape
    gn = gumbel(rng, (generate_n, cfg.vocab_size)) if generate_n else np.zeros((0, cfg.vocab_size))
    with tape:
        P = bind(checkpoint, tape) if params is None else params
        st = Stepper(P, cfg)
        tokens = list(prefix)
        for j, tok in enumerate(prefix):
            st.push(token_input(P, tok, j))
        for i in range(generate_n):
            z = st.logits[-1].data[0] / temperature
            tok = int(np.argmax(z + gn[i]))
            tokens.append(tok)
            st.push(token_input(P, tok, len(tokens) - 1))
        trace = _make_trace(st, np.array(tokens), len(prefix), tape, P, cfg, temperature, gn)
    return trace
