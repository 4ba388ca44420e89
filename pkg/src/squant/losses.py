"""Training objectives: soft distillation plus two quantization-shaping terms.

- Entropy term: -log(eps + sum over layer-heads of log(1 + var_q * var_k)),
  pushing quantized query/key variances up (maximum-entropy direction for
  Gaussian-shaped activations).
- Distribution term: cosine alignment between the student's attention maps
  and the full-precision teacher's. The default convention contributes
  -log(eps + sum of cosines) so that minimizing the total raises similarity;
  ``literal_sign=True`` keeps the positive-log form instead.
- Distillation: (1 - gamma) * CE + gamma * tau^2 * KL at temperature tau.

Total: distill + r_E * entropy + r_D * distribution, defaults r_E = 0.5,
r_D = 1.0. Natural logs throughout; eps = 1e-8 guards the outer logs.
"""

from __future__ import annotations

from dataclasses import asdict, dataclass

import numpy as np

from . import gradtape as gt

EPS = 1e-8

__all__ = [
    "EPS",
    "GaussianStats",
    "LossReport",
    "attention_alignment",
    "distill_loss_node",
    "distribution_loss",
    "distribution_loss_node",
    "entropy_loss",
    "entropy_loss_node",
    "qk_stats",
    "total_loss_node",
]


@dataclass
class GaussianStats:
    """Population variances of query and key entries, per (layer, head)."""

    var_q: np.ndarray
    var_k: np.ndarray

    def __post_init__(self):
        self.var_q = np.asarray(self.var_q, dtype=np.float64)
        self.var_k = np.asarray(self.var_k, dtype=np.float64)
        if self.var_q.shape != self.var_k.shape:
            raise ValueError("var_q and var_k must have matching [L,H] shapes")
        if (self.var_q < 0).any() or (self.var_k < 0).any():
            raise ValueError("variances cannot be negative")


@dataclass
class LossReport:
    """Per-step scalar record; total reassembles exactly from the parts."""

    ce: float
    kl: float
    entropy_loss: float
    distribution_loss: float
    distill: float
    total: float
    r_E: float
    r_D: float
    gamma: float
    tau: float

    def reassembled(self) -> float:
        """Recombine the parts in the same float32 order the tape used."""
        f = np.float32
        t1 = f(self.ce) * f(1.0 - self.gamma)
        t2 = f(self.kl) * f(self.gamma * self.tau * self.tau)
        distill = t1 + t2
        out = (distill + f(self.entropy_loss) * f(self.r_E)) + f(
            self.distribution_loss
        ) * f(self.r_D)
        return float(out)

    def to_dict(self) -> dict:
        return asdict(self)

    @classmethod
    def from_dict(cls, d: dict) -> "LossReport":
        return cls(**{k: float(v) for k, v in d.items()})


def qk_stats(q: np.ndarray, k: np.ndarray) -> GaussianStats:
    """Per layer-head population variance over all token-by-dim entries."""
    q = np.asarray(q, dtype=np.float64)
    k = np.asarray(k, dtype=np.float64)
    if q.shape != k.shape or q.ndim != 4:
        raise ValueError(f"q and k must both be [L,H,N,d], got {q.shape} and {k.shape}")
    return GaussianStats(var_q=q.var(axis=(2, 3)), var_k=k.var(axis=(2, 3)))


def entropy_loss(stats: GaussianStats, eps: float = EPS) -> float:
    if eps <= 0:
        raise ValueError("eps must be positive")
    inner = np.sum(np.log(1.0 + stats.var_q * stats.var_k))
    return float(-np.log(eps + inner))


def attention_alignment(attn_q: np.ndarray, attn_f: np.ndarray) -> float:
    """Sum over layer-heads of cosine similarity between flattened maps."""
    attn_q = np.asarray(attn_q, dtype=np.float64)
    attn_f = np.asarray(attn_f, dtype=np.float64)
    if attn_q.shape != attn_f.shape or attn_q.ndim != 4:
        raise ValueError(f"maps must share [L,H,N,N] shape, got {attn_q.shape} vs {attn_f.shape}")
    l, h = attn_q.shape[:2]
    aq = attn_q.reshape(l * h, -1)
    af = attn_f.reshape(l * h, -1)
    num = (aq * af).sum(axis=1)
    den = np.linalg.norm(aq, axis=1) * np.linalg.norm(af, axis=1)
    return float((num / den).sum())


def distribution_loss(
    attn_q: np.ndarray, attn_f: np.ndarray, eps: float = EPS, literal_sign: bool = False
) -> float:
    s = attention_alignment(attn_q, attn_f)
    value = np.log(eps + s)
    return float(value if literal_sign else -value)


# ---------------------------------------------------------------------------
# tape builders


def _wrap_term(term: str, build):
    try:
        return build()
    except ValueError as e:
        raise ValueError(f"{term} term failed: {e}") from e


def entropy_loss_node(
    q_nodes: list, k_nodes: list, heads: int, eps: float = EPS
) -> tuple[gt.Tensor, GaussianStats]:
    """Entropy term over per-layer [N, d] quantized q/k tape tensors.

    Head h owns the column block [h*dh, (h+1)*dh); variances are taken over
    that whole block. Also returns the detached variance values.
    """
    if len(q_nodes) != len(k_nodes) or not q_nodes:
        raise ValueError("need matching non-empty q and k node lists")

    def build():
        var_q, var_k = [], []
        inner = None
        for ql, kl in zip(q_nodes, k_nodes):
            d = ql.shape[1]
            if d % heads:
                raise ValueError(f"width {d} not divisible by {heads} heads")
            dh = d // heads
            vq_row, vk_row = [], []
            for h in range(heads):
                vq = gt.variance_all(gt.slice_cols(ql, h * dh, (h + 1) * dh))
                vk = gt.variance_all(gt.slice_cols(kl, h * dh, (h + 1) * dh))
                vq_row.append(float(vq.array))
                vk_row.append(float(vk.array))
                term = gt.log(gt.add_scalar(gt.mul(vq, vk), 1.0))
                inner = term if inner is None else gt.add(inner, term)
            var_q.append(vq_row)
            var_k.append(vk_row)
        node = gt.neg(gt.log(gt.add_scalar(inner, eps)))
        return node, GaussianStats(var_q=np.array(var_q), var_k=np.array(var_k))

    return _wrap_term("entropy", build)


def distribution_loss_node(
    attn_nodes: list,
    teacher_probs: np.ndarray,
    eps: float = EPS,
    literal_sign: bool = False,
) -> tuple[gt.Tensor, float]:
    """Alignment term over per-layer lists of [N, N] student attention nodes.

    ``teacher_probs`` is the detached [L, H, N, N] teacher map stack. Returns
    the loss node and the detached cosine sum.
    """
    teacher_probs = np.asarray(teacher_probs, dtype=np.float64)

    def build():
        total = None
        for l, layer_nodes in enumerate(attn_nodes):
            for h, node in enumerate(layer_nodes):
                tape = node.tape
                target = teacher_probs[l, h].astype(tape.dtype)
                if node.shape != target.shape:
                    raise ValueError(
                        f"map shape {node.shape} differs from teacher {target.shape}"
                    )
                t_const = tape.constant(target, name=f"teacher_map_{l}_{h}")
                num = gt.sum_all(gt.mul(node, t_const))
                qq = gt.sqrt(gt.sum_all(gt.mul(node, node)))
                t_norm = tape.constant(
                    np.asarray(np.linalg.norm(target)), name=f"teacher_norm_{l}_{h}"
                )
                cos = gt.div(num, gt.mul(qq, t_norm))
                total = cos if total is None else gt.add(total, cos)
        if total is None:
            raise ValueError("no attention nodes given")
        alignment = float(total.array)
        node = gt.log(gt.add_scalar(total, eps))
        if not literal_sign:
            node = gt.neg(node)
        return node, alignment

    return _wrap_term("distribution", build)


def distill_loss_node(
    student_logits: gt.Tensor,
    teacher_logits: np.ndarray,
    targets: np.ndarray,
    gamma: float,
    tau: float,
) -> tuple[gt.Tensor, gt.Tensor, gt.Tensor]:
    """(1-gamma)*CE + gamma*tau^2*KL; returns (distill, ce, kl) nodes."""
    if not 0.0 <= gamma <= 1.0:
        raise ValueError(f"gamma must be in [0,1], got {gamma}")
    if tau <= 0:
        raise ValueError(f"tau must be positive, got {tau}")

    def build():
        ce = gt.cross_entropy(student_logits, targets)
        kl = gt.kl_divergence(student_logits, teacher_logits, tau=tau)
        distill = gt.add(gt.mul_scalar(ce, 1.0 - gamma), gt.mul_scalar(kl, gamma * tau * tau))
        return distill, ce, kl

    return _wrap_term("distill", build)


def total_loss_node(
    distill: gt.Tensor,
    ce: gt.Tensor,
    kl: gt.Tensor,
    entropy: gt.Tensor,
    distribution: gt.Tensor,
    r_E: float,
    r_D: float,
    gamma: float,
    tau: float,
) -> tuple[gt.Tensor, LossReport]:
    """Weighted total plus the serializable per-step report."""

    def build():
        return gt.add(
            gt.add(distill, gt.mul_scalar(entropy, r_E)), gt.mul_scalar(distribution, r_D)
        )

    total = _wrap_term("total", build)
    report = LossReport(
        ce=float(ce.array),
        kl=float(kl.array),
        entropy_loss=float(entropy.array),
        distribution_loss=float(distribution.array),
        distill=float(distill.array),
        total=float(total.array),
        r_E=r_E,
        r_D=r_D,
        gamma=gamma,
        tau=tau,
    )
    return total, report
