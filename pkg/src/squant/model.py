"""Micro decoder-only transformer with a quantization-aware student path.

Pre-norm blocks, learned absolute positions, tanh-GELU MLP at 4x width,
causal attention, logits tied to the token embedding. The teacher runs in
plain float; the student fake-quantizes the inputs and weights of every
linear projection (q, k, v, out, both MLP layers) plus the post-projection
q/k values whose statistics feed the entropy term. Softmax, layernorm,
residual adds, embeddings, and the tied head stay in float.

Activation bit widths follow a per-token plan: uniform 4 or 8, or adaptive
where layer l > 0 plans from layer l-1's attention map in the same pass.
The integer inference path replaces each projection's matmul with the
kernel dispatch and reports its instruction cost.
"""

from __future__ import annotations

import math
from dataclasses import asdict, dataclass, field

import numpy as np

from . import gradtape as gt
from .kernels import CostCounter, gemm_i8, gemm_mixed, pack_int4
from .quant import EmaState, QuantSpec, calibrate_scale, clip_surrogate, dequantize, fake_quant, quantize
from .seeding import substream
from .token_bits import (
    TokenBitPlan,
    fake_quant_grouped,
    group_quantize,
    plan_for_layer,
    scatter_tokens,
    uniform_plan,
)

ACT_SITES = ("attn_in", "q_post", "k_post", "attn_out", "mlp_in", "mlp_hidden")

__all__ = [
    "ACT_SITES",
    "Calibration",
    "ForwardResult",
    "MicroTransformerConfig",
    "forward_int",
    "forward_tape",
    "forward_teacher",
    "init_params",
    "params_to_tape",
    "perplexity_eval",
]


@dataclass(frozen=True)
class MicroTransformerConfig:
    layers: int = 2
    heads: int = 2
    dim: int = 32
    vocab: int = 64
    seq_len: int = 32
    weight_bits: int = 4
    act_bits: object = "adaptive"  # 4, 8, or "adaptive"
    rho: float = 0.5
    r_E: float = 0.5
    r_D: float = 1.0
    gamma: float = 0.5
    tau: float = 2.0
    seed: int = 0
    lr: float = 0.05
    steps: int = 1000
    literal_distribution_sign: bool = False

    def __post_init__(self):
        if self.dim % self.heads:
            raise ValueError(f"dim {self.dim} not divisible by {self.heads} heads")
        if not 0.0 <= self.rho <= 1.0:
            raise ValueError(f"rho must be in [0,1], got {self.rho}")
        if self.weight_bits not in (4, 8):
            raise ValueError(f"weight_bits must be 4 or 8, got {self.weight_bits}")
        if self.act_bits not in (4, 8, "adaptive"):
            raise ValueError(f"act_bits must be 4, 8, or 'adaptive', got {self.act_bits!r}")
        if not 0.0 <= self.gamma <= 1.0:
            raise ValueError(f"gamma must be in [0,1], got {self.gamma}")
        if self.tau <= 0:
            raise ValueError(f"tau must be positive, got {self.tau}")

    @property
    def head_dim(self) -> int:
        return self.dim // self.heads

    def to_dict(self) -> dict:
        return asdict(self)


WEIGHT_NAMES = ("attn.wq", "attn.wk", "attn.wv", "attn.wo", "mlp.w1", "mlp.w2")


def init_params(cfg: MicroTransformerConfig) -> dict:
    """Seeded float32 parameter dict; every tensor gets its own substream.

    Projections use 1/sqrt(fan_in) scaling so post-layernorm activations
    (and hence q/k variances) start near unit scale; tiny GPT-2 style init
    leaves sum-of-log-variance terms minuscule and their gradients huge.
    """

    def draw(name, shape, scale):
        return (substream(cfg.seed, f"init.{name}").normal(size=shape) * scale).astype(np.float32)

    d, hidden = cfg.dim, 4 * cfg.dim
    params = {
        "tok_emb": draw("tok_emb", (cfg.vocab, d), 0.02),
        "pos_emb": draw("pos_emb", (cfg.seq_len, d), 0.02),
        "lnf.g": np.ones(d, dtype=np.float32),
        "lnf.b": np.zeros(d, dtype=np.float32),
    }
    for l in range(cfg.layers):
        p = f"l{l}."
        params[p + "ln1.g"] = np.ones(d, dtype=np.float32)
        params[p + "ln1.b"] = np.zeros(d, dtype=np.float32)
        params[p + "ln2.g"] = np.ones(d, dtype=np.float32)
        params[p + "ln2.b"] = np.zeros(d, dtype=np.float32)
        for w in ("wq", "wk", "wv", "wo"):
            params[p + f"attn.{w}"] = draw(p + f"attn.{w}", (d, d), d ** -0.5)
            params[p + f"attn.b{w[1]}"] = np.zeros(d, dtype=np.float32)
        params[p + "mlp.w1"] = draw(p + "mlp.w1", (d, hidden), d ** -0.5)
        params[p + "mlp.b1"] = np.zeros(hidden, dtype=np.float32)
        params[p + "mlp.w2"] = draw(p + "mlp.w2", (hidden, d), hidden ** -0.5)
        params[p + "mlp.b2"] = np.zeros(d, dtype=np.float32)
    return params


class Calibration:
    """EMA scale state per (layer, site, group) activation quantizer."""

    def __init__(self, momentum: float = 0.95):
        self.momentum = momentum
        self.ema: dict[str, EmaState] = {}

    def get(self, key: str) -> EmaState:
        if key not in self.ema:
            self.ema[key] = EmaState(momentum=self.momentum)
        return self.ema[key]

    def state_dict(self) -> dict:
        return {
            "momentum": self.momentum,
            "ema": {k: v.state_dict() for k, v in sorted(self.ema.items())},
        }

    @classmethod
    def from_state_dict(cls, d: dict) -> "Calibration":
        out = cls(momentum=d["momentum"])
        out.ema = {k: EmaState.from_state_dict(v) for k, v in d["ema"].items()}
        return out


@dataclass
class ForwardResult:
    logits: gt.Tensor
    attn_nodes: list  # [L][H] attention probability nodes
    attn_probs: np.ndarray  # [L,H,T,T] detached
    q_nodes: list  # per-layer [T,d] post-projection q (quantized when enabled)
    k_nodes: list
    plans: list  # per-layer TokenBitPlan, or None when not quantized
    scales_used: dict = field(default_factory=dict)


def params_to_tape(tape: gt.Tape, params: dict, trainable: bool = True) -> dict:
    make = tape.parameter if trainable else tape.constant
    return {name: make(arr, name=name) for name, arr in sorted(params.items())}


def _plan_for(cfg, layer, maps_so_far, n_tokens, plans_override):
    if plans_override is not None:
        return plans_override[layer]
    if cfg.act_bits == "adaptive":
        return plan_for_layer(layer, maps_so_far, cfg.rho, n_tokens)
    return uniform_plan(n_tokens, int(cfg.act_bits))


def forward_tape(
    tape: gt.Tape,
    tp: dict,
    tokens: np.ndarray,
    cfg: MicroTransformerConfig,
    quantized: bool = False,
    training: bool = False,
    calib: Calibration | None = None,
    plans_override: list | None = None,
    scale_overrides: dict | None = None,
    surrogate: bool = False,
) -> ForwardResult:
    """One forward pass; builds every op on the given tape.

    ``scale_overrides`` pins quantizer scales by key (weight name, or
    "l{l}.{site}.{hi|lo}") and ``plans_override`` pins per-layer bit plans;
    both exist so gradient checks can hold the quantization grid fixed.
    ``surrogate`` swaps rounding for the clip-only forward.
    """
    tokens = np.asarray(tokens, dtype=np.int64)
    t_len = tokens.size
    if not 1 <= t_len <= cfg.seq_len:
        raise ValueError(f"sequence length {t_len} outside [1, {cfg.seq_len}]")
    overrides = scale_overrides or {}
    scales_used: dict = {}

    def fq_weight(name):
        node = tp[name]
        if not quantized:
            return node
        scale = overrides.get(name)
        if scale is None:
            scale = calibrate_scale(node.array, cfg.weight_bits)
        scales_used[name] = scale
        spec = QuantSpec(bits=cfg.weight_bits, scale=scale, target="weight")
        return (clip_surrogate if surrogate else fake_quant)(node, spec)

    def fq_act(node, layer, site, plan):
        if not quantized:
            return node
        key = f"l{layer}.{site}"
        kw = {}
        for group in ("hi", "lo"):
            gkey = f"{key}.{group}"
            if gkey in overrides:
                kw[f"scale_{group}"] = overrides[gkey]
            elif calib is not None:
                kw[f"ema_{group}"] = calib.get(gkey)
        out = fake_quant_grouped(node, plan, training=training, surrogate=surrogate, **kw)
        for group, idx in (("hi", plan.bits == 8), ("lo", plan.bits == 4)):
            if idx.any():
                rows = node.array[idx]
                gkey = f"{key}.{group}"
                if gkey in overrides:
                    scales_used[gkey] = overrides[gkey]
                else:
                    bits = 8 if group == "hi" else 4
                    ema = calib.get(gkey) if calib is not None else None
                    if ema is not None:
                        frozen = ema.running_max
                        scales_used[gkey] = (
                            frozen / ((1 << (bits - 1)) - 1) if frozen > 0 else 1.0
                        )
                    else:
                        scales_used[gkey] = calibrate_scale(rows, bits)
        return out

    dh = cfg.head_dim
    pos_ids = np.arange(t_len)
    x = gt.add(gt.gather_rows(tp["tok_emb"], tokens), gt.gather_rows(tp["pos_emb"], pos_ids))
    attn_nodes, q_nodes, k_nodes, plans = [], [], [], []
    maps_so_far: list = []
    for l in range(cfg.layers):
        p = f"l{l}."
        h1 = gt.layernorm(x, tp[p + "ln1.g"], tp[p + "ln1.b"])
        plan = _plan_for(cfg, l, maps_so_far, t_len, plans_override) if quantized else None
        plans.append(plan)
        qx = fq_act(h1, l, "attn_in", plan)
        q = gt.add_bias(gt.matmul(qx, fq_weight(p + "attn.wq")), tp[p + "attn.bq"])
        k = gt.add_bias(gt.matmul(qx, fq_weight(p + "attn.wk")), tp[p + "attn.bk"])
        v = gt.add_bias(gt.matmul(qx, fq_weight(p + "attn.wv")), tp[p + "attn.bv"])
        q = fq_act(q, l, "q_post", plan)
        k = fq_act(k, l, "k_post", plan)
        q_nodes.append(q)
        k_nodes.append(k)
        heads, ctx_parts = [], []
        for h in range(cfg.heads):
            qh = gt.slice_cols(q, h * dh, (h + 1) * dh)
            kh = gt.slice_cols(k, h * dh, (h + 1) * dh)
            vh = gt.slice_cols(v, h * dh, (h + 1) * dh)
            scores = gt.mul_scalar(gt.matmul(qh, gt.transpose(kh)), 1.0 / math.sqrt(dh))
            probs = gt.softmax_rows(scores, causal=True)
            heads.append(probs)
            ctx_parts.append(gt.matmul(probs, vh))
        attn_nodes.append(heads)
        maps_so_far.append(np.stack([pr.array for pr in heads]))
        ctx = gt.concat_cols(ctx_parts)
        ctx = fq_act(ctx, l, "attn_out", plan)
        x = gt.add(x, gt.add_bias(gt.matmul(ctx, fq_weight(p + "attn.wo")), tp[p + "attn.bo"]))
        h2 = gt.layernorm(x, tp[p + "ln2.g"], tp[p + "ln2.b"])
        mx = fq_act(h2, l, "mlp_in", plan)
        hid = gt.gelu(gt.add_bias(gt.matmul(mx, fq_weight(p + "mlp.w1")), tp[p + "mlp.b1"]))
        hq = fq_act(hid, l, "mlp_hidden", plan)
        x = gt.add(x, gt.add_bias(gt.matmul(hq, fq_weight(p + "mlp.w2")), tp[p + "mlp.b2"]))
    xf = gt.layernorm(x, tp["lnf.g"], tp["lnf.b"])
    logits = gt.matmul(xf, gt.transpose(tp["tok_emb"]))
    return ForwardResult(
        logits=logits,
        attn_nodes=attn_nodes,
        attn_probs=np.stack(maps_so_far),
        q_nodes=q_nodes,
        k_nodes=k_nodes,
        plans=plans,
        scales_used=scales_used,
    )


def forward_teacher(cfg: MicroTransformerConfig, params: dict, tokens) -> ForwardResult:
    """Full-precision forward on a private tape (constants, no gradients)."""
    tape = gt.Tape(dtype=np.float32)
    tp = params_to_tape(tape, params, trainable=False)
    return forward_tape(tape, tp, tokens, cfg, quantized=False)


# ---------------------------------------------------------------------------
# integer inference path


def _linear_int(x, w, b, cfg, plan, calib, key, cost):
    """Quantized projection via the integer kernels, float bias after."""
    gq = group_quantize(
        x,
        plan,
        ema_hi=calib.get(f"{key}.hi") if calib else None,
        ema_lo=calib.get(f"{key}.lo") if calib else None,
        training=False,
    )
    w_scale = calibrate_scale(w, cfg.weight_bits)
    w_ints = quantize(w, QuantSpec(bits=cfg.weight_bits, scale=w_scale)).ints
    x_hi = gq.q_hi.ints.T  # kernel layout: [K, tokens]
    x_lo = gq.q_lo.ints.T
    wk = w_ints.T  # [out_dim, K]
    if cfg.weight_bits == 4:
        out_grouped = gemm_mixed(
            pack_int4(wk),
            {"hi": x_hi, "lo": x_lo},
            {"alpha_w": w_scale, "alpha_hi": gq.q_hi.scale, "alpha_lo": gq.q_lo.scale},
            cost,
        )
    else:
        # no packed path exists for 8-bit weights; both groups take the byte kernel
        parts = []
        for xg, scale in ((x_hi, gq.q_hi.scale), (x_lo, gq.q_lo.scale)):
            if xg.shape[1]:
                acc = gemm_i8(wk, xg, cost)
                parts.append(acc.astype(np.float32) * (np.float32(w_scale) * np.float32(scale)))
            else:
                parts.append(np.zeros((wk.shape[0], 0), dtype=np.float32))
        out_grouped = np.concatenate(parts, axis=1)
    n_hi = x_hi.shape[1]
    out = scatter_tokens(out_grouped.T[:n_hi], out_grouped.T[n_hi:], gq.groups)
    return out + b


def _dequant_rows(x, plan, calib, key):
    gq = group_quantize(
        x,
        plan,
        ema_hi=calib.get(f"{key}.hi") if calib else None,
        ema_lo=calib.get(f"{key}.lo") if calib else None,
        training=False,
    )
    return scatter_tokens(dequantize(gq.q_hi), dequantize(gq.q_lo), gq.groups)


def forward_int(
    cfg: MicroTransformerConfig,
    params: dict,
    tokens,
    calib: Calibration | None,
    cost: CostCounter | None = None,
) -> tuple[np.ndarray, list]:
    """Integer-kernel forward; returns (logits, per-layer bit plans).

    Float everywhere except the six projections, which run on quantized
    operands through the kernel dispatch. Uses frozen calibration scales.
    """
    cost = cost if cost is not None else CostCounter()
    tokens = np.asarray(tokens, dtype=np.int64)
    t_len = tokens.size
    if not 1 <= t_len <= cfg.seq_len:
        raise ValueError(f"sequence length {t_len} outside [1, {cfg.seq_len}]")
    if tokens.min() < 0 or tokens.max() >= cfg.vocab:
        raise IndexError("token id out of range")
    dh = cfg.head_dim
    x = params["tok_emb"][tokens] + params["pos_emb"][:t_len]
    maps_so_far: list = []
    plans = []
    for l in range(cfg.layers):
        p = f"l{l}."
        h1 = gt.layernorm_forward(x, params[p + "ln1.g"], params[p + "ln1.b"]).astype(np.float32)
        plan = _plan_for(cfg, l, maps_so_far, t_len, None)
        plans.append(plan)
        q = _linear_int(h1, params[p + "attn.wq"], params[p + "attn.bq"], cfg, plan, calib, f"l{l}.attn_in", cost)
        k = _linear_int(h1, params[p + "attn.wk"], params[p + "attn.bk"], cfg, plan, calib, f"l{l}.attn_in", cost)
        v = _linear_int(h1, params[p + "attn.wv"], params[p + "attn.bv"], cfg, plan, calib, f"l{l}.attn_in", cost)
        q = _dequant_rows(q, plan, calib, f"l{l}.q_post")
        k = _dequant_rows(k, plan, calib, f"l{l}.k_post")
        head_maps, ctx_parts = [], []
        for h in range(cfg.heads):
            qh, kh = q[:, h * dh : (h + 1) * dh], k[:, h * dh : (h + 1) * dh]
            scores = (qh @ kh.T) * np.float32(1.0 / math.sqrt(dh))
            probs = gt.softmax_forward(scores, causal=True).astype(np.float32)
            head_maps.append(probs)
            ctx_parts.append(probs @ v[:, h * dh : (h + 1) * dh])
        maps_so_far.append(np.stack(head_maps))
        ctx = np.concatenate(ctx_parts, axis=1).astype(np.float32)
        x = x + _linear_int(ctx, params[p + "attn.wo"], params[p + "attn.bo"], cfg, plan, calib, f"l{l}.attn_out", cost)
        h2 = gt.layernorm_forward(x, params[p + "ln2.g"], params[p + "ln2.b"]).astype(np.float32)
        hid = gt.gelu_forward(
            _linear_int(h2, params[p + "mlp.w1"], params[p + "mlp.b1"], cfg, plan, calib, f"l{l}.mlp_in", cost)
        ).astype(np.float32)
        x = x + _linear_int(hid, params[p + "mlp.w2"], params[p + "mlp.b2"], cfg, plan, calib, f"l{l}.mlp_hidden", cost)
    xf = gt.layernorm_forward(x, params["lnf.g"], params["lnf.b"]).astype(np.float32)
    return xf @ params["tok_emb"].T, plans


def perplexity_eval(
    cfg: MicroTransformerConfig,
    params: dict,
    corpus: np.ndarray,
    calib: Calibration | None = None,
    quantized: bool = True,
) -> float:
    """exp(mean next-token CE) over non-overlapping windows of the stream."""
    corpus = np.asarray(corpus, dtype=np.int64)
    n = cfg.seq_len
    if corpus.size < n + 1:
        raise ValueError(f"corpus of {corpus.size} tokens is too short for eval")
    ces = []
    for start in range(0, corpus.size - n, n):
        window = corpus[start : start + n + 1]
        tape = gt.Tape(dtype=np.float32)
        tp = params_to_tape(tape, params, trainable=False)
        res = forward_tape(
            tape, tp, window[:-1], cfg, quantized=quantized, training=False, calib=calib
        )
        ces.append(gt.cross_entropy(res.logits, window[1:]).item())
    return float(np.exp(np.mean(ces)))
