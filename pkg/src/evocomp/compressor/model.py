"""Single-layer bidirectional-attention compressor.

The block applies pre-norm bidirectional multi-head attention over the
concatenated visual+text sequence, then a feed-forward, and adds the raw
input back onto the block output:

    h = x + FF(LN2(MHA(LN1(x))))

There are no other residual paths, so zeroing every block weight makes the
representations equal the inputs bit-for-bit. A logistic classifier on the
visual rows of h produces the retention probabilities. All computation is
float64; parameter files store float32.

Gradients are hand-derived per layer; ``grad_check`` certifies them against
central finite differences with the density weights frozen.
"""

from __future__ import annotations

import json
import struct
from dataclasses import dataclass, fields
from pathlib import Path

import numpy as np

from evocomp.core import DataError, Mask, Sample
from evocomp.grouping import round_half_away
from evocomp.losses import (
    GhmConfig,
    LossBatch,
    PROB_CLAMP,
    cs_grad_reps,
    cs_loss,
    ghm_c_loss,
    ghm_weights,
    gradient_norms,
)

LN_EPS = 1e-6
PARAMS_MAGIC = b"EVP1"


@dataclass(frozen=True)
class CompressorConfig:
    d_model: int = 64
    heads: int = 4
    mlp_ratio: int = 4
    use_positions: bool = False
    epochs: int = 30
    lr0: float = 0.003
    batch_size: int = 64
    alpha: float = 1.0
    ghm: GhmConfig = GhmConfig()
    seed: int = 0

    def __post_init__(self) -> None:
        if self.d_model % self.heads != 0:
            raise DataError("d_model must be divisible by heads")
        if self.epochs < 1:
            raise DataError("epochs must be >= 1")
        if self.lr0 <= 0.0:
            raise DataError("lr0 must be positive")
        if self.batch_size < 1:
            raise DataError("batch_size must be >= 1")

    def to_header(self) -> dict:
        return {
            "d_model": self.d_model,
            "heads": self.heads,
            "mlp_ratio": self.mlp_ratio,
            "use_positions": self.use_positions,
            "epochs": self.epochs,
            "lr0": self.lr0,
            "batch_size": self.batch_size,
            "alpha": self.alpha,
            "ghm_mode": self.ghm.mode,
            "ghm_bins": self.ghm.bins,
            "ghm_epsilon": self.ghm.epsilon,
            "ghm_momentum": self.ghm.momentum,
            "seed": self.seed,
        }

    @classmethod
    def from_header(cls, header: dict) -> "CompressorConfig":
        return cls(
            d_model=header["d_model"],
            heads=header["heads"],
            mlp_ratio=header["mlp_ratio"],
            use_positions=header["use_positions"],
            epochs=header["epochs"],
            lr0=header["lr0"],
            batch_size=header["batch_size"],
            alpha=header["alpha"],
            ghm=GhmConfig(
                mode=header["ghm_mode"],
                bins=header["ghm_bins"],
                epsilon=header["ghm_epsilon"],
                momentum=header["ghm_momentum"],
            ),
            seed=header["seed"],
        )


@dataclass
class CompressorParams:
    wq: np.ndarray
    wk: np.ndarray
    wv: np.ndarray
    wo: np.ndarray
    ln1_gamma: np.ndarray
    ln1_beta: np.ndarray
    ln2_gamma: np.ndarray
    ln2_beta: np.ndarray
    ff_w1: np.ndarray
    ff_b1: np.ndarray
    ff_w2: np.ndarray
    ff_b2: np.ndarray
    cls_w: np.ndarray
    cls_b: np.ndarray  # shape (1,)

    def as_dict(self) -> dict[str, np.ndarray]:
        return {f.name: getattr(self, f.name) for f in fields(self)}

    def copy(self) -> "CompressorParams":
        return CompressorParams(**{k: v.copy() for k, v in self.as_dict().items()})

    def zero_like(self) -> dict[str, np.ndarray]:
        return {k: np.zeros_like(v) for k, v in self.as_dict().items()}

    def validate(self, cfg: CompressorConfig) -> None:
        d, ratio = cfg.d_model, cfg.mlp_ratio
        expected = _shapes(d, ratio)
        for name, arr in self.as_dict().items():
            if arr.shape != expected[name]:
                raise DataError(f"{name}: shape {arr.shape} != expected {expected[name]}")
            if not np.isfinite(arr).all():
                raise DataError(f"{name}: non-finite parameter entry")


def _shapes(d: int, ratio: int) -> dict[str, tuple]:
    return {
        "wq": (d, d), "wk": (d, d), "wv": (d, d), "wo": (d, d),
        "ln1_gamma": (d,), "ln1_beta": (d,),
        "ln2_gamma": (d,), "ln2_beta": (d,),
        "ff_w1": (d, ratio * d), "ff_b1": (ratio * d,),
        "ff_w2": (ratio * d, d), "ff_b2": (d,),
        "cls_w": (d,), "cls_b": (1,),
    }

BLOCK_PARAM_NAMES = (
    "wq", "wk", "wv", "wo",
    "ln1_gamma", "ln1_beta", "ln2_gamma", "ln2_beta",
    "ff_w1", "ff_b1", "ff_w2", "ff_b2",
)


@dataclass(frozen=True)
class ForwardOutput:
    visual_reps: np.ndarray
    text_reps: np.ndarray
    probs: np.ndarray


def init_params(
    cfg: CompressorConfig,
    donor: str | Path | CompressorParams | None = None,
    rng: np.random.Generator | None = None,
) -> CompressorParams:
    """Fresh parameters; donor block weights are copied verbatim when given,
    but the classifier is always freshly initialized."""
    rng = rng or np.random.default_rng(cfg.seed)
    d, ratio = cfg.d_model, cfg.mlp_ratio
    std = 0.02

    def gauss(shape):
        return rng.normal(0.0, std, size=shape)

    params = CompressorParams(
        wq=gauss((d, d)), wk=gauss((d, d)), wv=gauss((d, d)), wo=gauss((d, d)),
        ln1_gamma=np.ones(d), ln1_beta=np.zeros(d),
        ln2_gamma=np.ones(d), ln2_beta=np.zeros(d),
        ff_w1=gauss((d, ratio * d)), ff_b1=np.zeros(ratio * d),
        ff_w2=gauss((ratio * d, d)), ff_b2=np.zeros(d),
        cls_w=gauss((d,)), cls_b=np.zeros(1),
    )
    if donor is not None:
        if isinstance(donor, (str, Path)):
            donor, donor_header = load_params(donor)
            if donor_header["d_model"] != cfg.d_model or donor_header["mlp_ratio"] != cfg.mlp_ratio:
                raise DataError(
                    f"donor dimensions (d_model={donor_header['d_model']}, "
                    f"mlp_ratio={donor_header['mlp_ratio']}) do not match the config"
                )
        donor.validate(
            CompressorConfig(d_model=cfg.d_model, heads=cfg.heads, mlp_ratio=cfg.mlp_ratio)
        )
        for name in BLOCK_PARAM_NAMES:
            setattr(params, name, getattr(donor, name).copy())
    params.validate(cfg)
    return params


# ---------------------------------------------------------------------------
# Forward / backward


def _layernorm(x: np.ndarray, gamma: np.ndarray, beta: np.ndarray):
    mu = x.mean(axis=-1, keepdims=True)
    xc = x - mu
    var = (xc * xc).mean(axis=-1, keepdims=True)
    inv = 1.0 / np.sqrt(var + LN_EPS)
    xhat = xc * inv
    return gamma * xhat + beta, (xhat, inv, gamma)


def _layernorm_backward(dy: np.ndarray, cache) -> tuple[np.ndarray, np.ndarray, np.ndarray]:
    xhat, inv, gamma = cache
    dxhat = dy * gamma
    dx = inv * (
        dxhat
        - dxhat.mean(axis=-1, keepdims=True)
        - xhat * (dxhat * xhat).mean(axis=-1, keepdims=True)
    )
    return dx, (dy * xhat).sum(axis=0), dy.sum(axis=0)


_GELU_C = np.sqrt(2.0 / np.pi)
_GELU_A = 0.044715


def _gelu(x: np.ndarray) -> np.ndarray:
    return 0.5 * x * (1.0 + np.tanh(_GELU_C * (x + _GELU_A * x**3)))


def _gelu_grad(x: np.ndarray) -> np.ndarray:
    t = np.tanh(_GELU_C * (x + _GELU_A * x**3))
    return 0.5 * (1.0 + t) + 0.5 * x * (1.0 - t * t) * _GELU_C * (1.0 + 3.0 * _GELU_A * x * x)


def _rotary_angles(seq_len: int, dh: int) -> np.ndarray:
    if dh % 2 != 0:
        raise DataError("rotary positions require an even head dimension")
    inv_freq = 10000.0 ** (-np.arange(0, dh, 2) / dh)
    return np.arange(seq_len)[:, None] * inv_freq[None, :]  # (S, dh/2)


def _rotate(x: np.ndarray, angles: np.ndarray, sign: float = 1.0) -> np.ndarray:
    """Rotate consecutive pairs of head dims by per-position angles.
    x: (H, S, dh); sign=-1 applies the inverse rotation (used in backward)."""
    cos = np.cos(angles)[None, :, :]
    sin = np.sin(angles)[None, :, :] * sign
    x1, x2 = x[..., 0::2], x[..., 1::2]
    out = np.empty_like(x)
    out[..., 0::2] = x1 * cos - x2 * sin
    out[..., 1::2] = x1 * sin + x2 * cos
    return out


def _split_heads(x: np.ndarray, heads: int) -> np.ndarray:
    s, d = x.shape
    return x.reshape(s, heads, d // heads).transpose(1, 0, 2)  # (H, S, dh)


def _merge_heads(x: np.ndarray) -> np.ndarray:
    h, s, dh = x.shape
    return x.transpose(1, 0, 2).reshape(s, h * dh)


def forward_tokens(
    visual: np.ndarray,
    text: np.ndarray,
    params: CompressorParams,
    cfg: CompressorConfig,
    with_cache: bool = False,
):
    """Run the block + classifier over raw token matrices (float64)."""
    n = visual.shape[0]
    if n == 0:
        raise DataError("need at least one visual token")
    if visual.shape[1] != cfg.d_model:
        raise DataError(f"token width {visual.shape[1]} != d_model {cfg.d_model}")
    if text.shape[0] > 0 and text.shape[1] != cfg.d_model:
        raise DataError(f"text width {text.shape[1]} != d_model {cfg.d_model}")

    x = np.concatenate([visual, text], axis=0).astype(np.float64)
    a1, ln1_cache = _layernorm(x, params.ln1_gamma, params.ln1_beta)
    q = _split_heads(a1 @ params.wq, cfg.heads)
    k = _split_heads(a1 @ params.wk, cfg.heads)
    v = _split_heads(a1 @ params.wv, cfg.heads)
    angles = None
    if cfg.use_positions:
        angles = _rotary_angles(x.shape[0], cfg.d_model // cfg.heads)
        q = _rotate(q, angles)
        k = _rotate(k, angles)
    scale = 1.0 / np.sqrt(cfg.d_model / cfg.heads)
    scores = np.einsum("hsd,htd->hst", q, k) * scale
    scores -= scores.max(axis=-1, keepdims=True)
    exp = np.exp(scores)
    attn = exp / exp.sum(axis=-1, keepdims=True)
    ctx = _merge_heads(np.einsum("hst,htd->hsd", attn, v))
    attn_out = ctx @ params.wo

    a2, ln2_cache = _layernorm(attn_out, params.ln2_gamma, params.ln2_beta)
    f1 = a2 @ params.ff_w1 + params.ff_b1
    g1 = _gelu(f1)
    f2 = g1 @ params.ff_w2 + params.ff_b2
    out = x + f2

    logits = out[:n] @ params.cls_w + params.cls_b[0]
    probs = np.clip(1.0 / (1.0 + np.exp(-logits)), PROB_CLAMP, 1.0 - PROB_CLAMP)

    result = ForwardOutput(visual_reps=out[:n], text_reps=out[n:], probs=probs)
    if not with_cache:
        return result
    cache = {
        "n": n, "x": x, "ln1": ln1_cache, "q": q, "k": k, "v": v, "angles": angles,
        "scale": scale, "attn": attn, "ctx": ctx, "ln2": ln2_cache,
        "a1": a1, "a2": a2, "f1": f1, "g1": g1, "out": out, "logits": logits,
    }
    return result, cache


def forward(sample: Sample, params: CompressorParams, cfg: CompressorConfig) -> ForwardOutput:
    """Forward over a sample, adapting the embedding width if necessary."""
    visual = np.asarray(sample.visual, dtype=np.float64)
    text = np.asarray(sample.text, dtype=np.float64)
    if visual.shape[1] != cfg.d_model:
        visual = adapt_dim(visual, cfg.d_model)
        text = adapt_dim(text, cfg.d_model) if text.shape[0] else np.zeros((0, cfg.d_model))
    return forward_tokens(visual, text, params, cfg)


def backward_tokens(
    params: CompressorParams,
    cfg: CompressorConfig,
    cache: dict,
    d_reps: np.ndarray,
    d_logits: np.ndarray,
) -> dict[str, np.ndarray]:
    """Gradients of (upstream . outputs) with respect to every parameter.

    ``d_reps`` is the upstream gradient on the full (n+m, d) representation
    matrix, ``d_logits`` the upstream gradient on the n classifier logits.
    """
    n = cache["n"]
    out = cache["out"]
    grads: dict[str, np.ndarray] = {}

    d_out = d_reps.copy()
    grads["cls_w"] = out[:n].T @ d_logits
    grads["cls_b"] = np.array([d_logits.sum()])
    d_out[:n] += np.outer(d_logits, params.cls_w)

    # out = x + f2
    d_f2 = d_out
    grads["ff_w2"] = cache["g1"].T @ d_f2
    grads["ff_b2"] = d_f2.sum(axis=0)
    d_g1 = d_f2 @ params.ff_w2.T
    d_f1 = d_g1 * _gelu_grad(cache["f1"])
    grads["ff_w1"] = cache["a2"].T @ d_f1
    grads["ff_b1"] = d_f1.sum(axis=0)
    d_a2 = d_f1 @ params.ff_w1.T
    d_attn_out, grads["ln2_gamma"], grads["ln2_beta"] = _layernorm_backward(d_a2, cache["ln2"])

    grads["wo"] = cache["ctx"].T @ d_attn_out
    d_ctx = _split_heads(d_attn_out @ params.wo.T, cfg.heads)
    attn, q, k, v = cache["attn"], cache["q"], cache["k"], cache["v"]
    d_attn = np.einsum("hsd,htd->hst", d_ctx, v)
    d_v = np.einsum("hst,hsd->htd", attn, d_ctx)
    d_scores = attn * (d_attn - (d_attn * attn).sum(axis=-1, keepdims=True))
    d_q = np.einsum("hst,htd->hsd", d_scores, k) * cache["scale"]
    d_k = np.einsum("hst,hsd->htd", d_scores, q) * cache["scale"]
    if cfg.use_positions:
        d_q = _rotate(d_q, cache["angles"], sign=-1.0)
        d_k = _rotate(d_k, cache["angles"], sign=-1.0)

    a1 = cache["a1"]
    grads["wq"] = a1.T @ _merge_heads(d_q)
    grads["wk"] = a1.T @ _merge_heads(d_k)
    grads["wv"] = a1.T @ _merge_heads(d_v)
    d_a1 = (
        _merge_heads(d_q) @ params.wq.T
        + _merge_heads(d_k) @ params.wk.T
        + _merge_heads(d_v) @ params.wv.T
    )
    _, grads["ln1_gamma"], grads["ln1_beta"] = _layernorm_backward(d_a1, cache["ln1"])
    return grads


# ---------------------------------------------------------------------------
# Width adaptation, top-r selection


def adapt_dim(rows: np.ndarray, d_out: int) -> np.ndarray:
    """Adaptive average pooling along the feature axis:
    out[k] = mean(in[floor(k*d_in/d_out) : ceil((k+1)*d_in/d_out)])."""
    rows = np.asarray(rows, dtype=np.float64)
    d_in = rows.shape[1]
    if d_in < 1 or d_out < 1:
        raise DataError("widths must be >= 1")
    if d_in == d_out:
        return rows.copy()
    out = np.empty((rows.shape[0], d_out), dtype=np.float64)
    for k in range(d_out):
        lo = (k * d_in) // d_out
        hi = -((-(k + 1) * d_in) // d_out)
        out[:, k] = rows[:, lo:hi].mean(axis=1)
    return out


def select_top_r(probs: np.ndarray, r: int) -> Mask:
    """Mask with 1s at the r largest probabilities; ties break to lower index."""
    probs = np.asarray(probs, dtype=np.float64)
    n = probs.shape[0]
    if not 0 <= r <= n:
        raise DataError(f"r={r} out of range for {n} tokens")
    order = np.argsort(-probs, kind="stable")
    bits = [0] * n
    for i in order[:r]:
        bits[int(i)] = 1
    return Mask(bits=tuple(bits))


def ratio_to_r(ratio: float, n: int) -> int:
    """r = round(ratio * n), half away from zero, clamped to [0, n]."""
    return min(n, max(0, round_half_away(ratio * n)))


# ---------------------------------------------------------------------------
# Parameter files ("EVP1")


def params_to_bytes(params: CompressorParams, cfg: CompressorConfig, extra: dict | None = None) -> bytes:
    header = dict(cfg.to_header())
    if extra:
        header.update(extra)
    header_bytes = json.dumps(header, sort_keys=True, separators=(",", ":")).encode("utf-8")
    chunks = [PARAMS_MAGIC, struct.pack("<I", len(header_bytes)), header_bytes]
    for name, arr in params.as_dict().items():
        name_b = name.encode("utf-8")
        chunks.append(struct.pack("<I", len(name_b)))
        chunks.append(name_b)
        chunks.append(struct.pack("<I", arr.ndim))
        chunks.append(struct.pack(f"<{arr.ndim}I", *arr.shape))
        chunks.append(np.ascontiguousarray(arr, dtype="<f4").tobytes())
    return b"".join(chunks)


def save_params(path: str | Path, params: CompressorParams, cfg: CompressorConfig, extra: dict | None = None) -> None:
    Path(path).write_bytes(params_to_bytes(params, cfg, extra))


def load_params(path: str | Path) -> tuple[CompressorParams, dict]:
    blob = Path(path).read_bytes()
    if blob[:4] != PARAMS_MAGIC:
        raise DataError(f"{path}: not a parameter file (bad magic)")
    (header_len,) = struct.unpack_from("<I", blob, 4)
    header = json.loads(blob[8 : 8 + header_len].decode("utf-8"))
    offset = 8 + header_len
    arrays: dict[str, np.ndarray] = {}
    while offset < len(blob):
        (name_len,) = struct.unpack_from("<I", blob, offset)
        offset += 4
        name = blob[offset : offset + name_len].decode("utf-8")
        offset += name_len
        (ndim,) = struct.unpack_from("<I", blob, offset)
        offset += 4
        shape = struct.unpack_from(f"<{ndim}I", blob, offset)
        offset += 4 * ndim
        count = int(np.prod(shape)) if ndim else 1
        arrays[name] = (
            np.frombuffer(blob, dtype="<f4", count=count, offset=offset)
            .reshape(shape)
            .astype(np.float64)
        )
        offset += count * 4
    try:
        params = CompressorParams(**arrays)
    except TypeError as exc:
        raise DataError(f"{path}: missing or unexpected parameter arrays: {exc}") from exc
    return params, header


# ---------------------------------------------------------------------------
# Gradient certification


def training_grads(
    visual: np.ndarray,
    text: np.ndarray,
    labels: np.ndarray,
    params: CompressorParams,
    cfg: CompressorConfig,
    beta: np.ndarray | None = None,
) -> tuple[float, dict[str, np.ndarray]]:
    """Loss value and parameter gradients for one sample under the combined
    objective, with the density weights frozen (computed here if not given)."""
    out, cache = forward_tokens(visual, text, params, cfg, with_cache=True)
    batch = LossBatch(probs=out.probs, labels=labels, reps=out.visual_reps)
    if beta is None:
        beta = ghm_weights(gradient_norms(batch.probs, batch.labels), cfg.ghm)
    n = batch.n
    value = ghm_c_loss(batch, cfg.ghm, beta=beta) + cfg.alpha * cs_loss(batch)
    d_logits = beta * (batch.probs - batch.labels) / n
    d_reps = np.zeros_like(cache["out"])
    if cfg.alpha != 0.0:
        d_reps[:n] = cfg.alpha * cs_grad_reps(batch)
    grads = backward_tokens(params, cfg, cache, d_reps, d_logits)
    return value, grads


def grad_check(
    params: CompressorParams,
    sample: Sample,
    label_bits: tuple[int, ...] | list[int],
    cfg: CompressorConfig,
    h: float = 1e-5,
    n_coords: int = 200,
    rng: np.random.Generator | None = None,
    corrupt=None,
) -> float:
    """Max relative error between analytic parameter gradients and central
    finite differences over >= n_coords random coordinates spanning every
    parameter group. ``corrupt`` (tests only) may mutate the analytic
    gradients before comparison."""
    rng = rng or np.random.default_rng(0)
    visual = np.asarray(sample.visual, dtype=np.float64)
    text = np.asarray(sample.text, dtype=np.float64)
    labels = np.asarray(label_bits, dtype=np.float64)
    if labels.shape[0] != visual.shape[0]:
        raise DataError("label length must equal the visual token count")

    out = forward_tokens(visual, text, params, cfg)
    beta = ghm_weights(gradient_norms(out.probs, labels), cfg.ghm)
    _, grads = training_grads(visual, text, labels, params, cfg, beta=beta)
    if corrupt is not None:
        corrupt(grads)

    def objective(test_params: CompressorParams) -> float:
        o = forward_tokens(visual, text, test_params, cfg)
        b = LossBatch(probs=o.probs, labels=labels, reps=o.visual_reps)
        return ghm_c_loss(b, cfg.ghm, beta=beta) + cfg.alpha * cs_loss(b)

    names = list(params.as_dict().keys())
    per_group = max(1, -(-n_coords // len(names)))
    max_err = 0.0
    work = params.copy()
    for name in names:
        arr = getattr(work, name)
        size = arr.size
        picks = rng.choice(size, size=min(per_group, size), replace=False)
        for flat in picks:
            flat = int(flat)
            orig = arr.flat[flat]
            arr.flat[flat] = orig + h
            f_plus = objective(work)
            arr.flat[flat] = orig - h
            f_minus = objective(work)
            arr.flat[flat] = orig
            numeric = (f_plus - f_minus) / (2.0 * h)
            analytic = grads[name].flat[flat]
            err = abs(analytic - numeric) / max(abs(analytic), abs(numeric), 1e-8)
            max_err = max(max_err, err)
    return max_err
