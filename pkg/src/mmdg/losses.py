"""Classification and contrastive alignment objectives."""
from __future__ import annotations

from dataclasses import dataclass

import numpy as np

from .numerics import DimensionError, Tensor, add, cosine_matrix, exp, mul, neg, softmax_cross_entropy

DEFAULT_LAMBDA = 0.1


def _inv_temperature(tau) -> Tensor:
    """1/tau as a tensor; a log-temperature tensor keeps the gradient path."""
    if isinstance(tau, Tensor):
        return exp(neg(tau))
    if tau <= 0:
        raise ValueError(f"temperature must be > 0, got {tau}")
    return Tensor(np.asarray(1.0 / tau))


def infonce_directional(x: Tensor, y: Tensor, tau) -> Tensor:
    """Mean over anchors x_i of -log softmax_j(cos(x_i, y_j) / tau)[i].

    ``tau`` is either a positive float or a scalar tensor holding log(tau).
    """
    if x.shape != y.shape or x.data.ndim != 2:
        raise DimensionError(f"alignment needs equal (batch, dim) shapes, got {x.shape} and {y.shape}")
    inv = _inv_temperature(tau)
    if inv.dtype != x.dtype:
        inv = Tensor(inv.data.astype(x.dtype)) if not inv.requires_grad else inv
    logits = mul(cosine_matrix(x, y), inv)
    return softmax_cross_entropy(logits, np.arange(x.shape[0]))


def alignment_pair_loss(x: Tensor, y: Tensor, tau) -> Tensor:
    return add(infonce_directional(x, y, tau), infonce_directional(y, x, tau))


@dataclass
class LossBreakdown:
    L_c: float
    L_ap_t: float
    L_m_t: float
    L_a_t: float
    L_align: float
    total: float
    lam: float

    def check(self, atol: float = 1e-5) -> None:
        parts = self.L_ap_t + self.L_m_t + self.L_a_t
        assert abs(self.L_align - parts) <= atol * max(1.0, abs(parts)), (self.L_align, parts)
        want = self.L_c + self.lam * self.L_align
        assert abs(self.total - want) <= atol * max(1.0, abs(want)), (self.total, want)

    def as_dict(self) -> dict[str, float]:
        return {"L_c": self.L_c, "L_align": self.L_align, "total": self.total}


def total_loss(
    out,
    labels,
    tau,
    lam: float = DEFAULT_LAMBDA,
    align: bool = True,
    audio_target: str = "audio",
) -> tuple[Tensor, LossBreakdown]:
    """Cross-entropy plus ``lam`` times the summed symmetric alignment losses.

    Appearance (or the early-fused appearance-motion feature) and motion align
    with the visual narration; audio aligns with the audio narration
    (``audio_target="audio"``) or with the visual one (``"visual"``).
    Returns the differentiable total and a float breakdown.
    """
    if audio_target not in ("audio", "visual"):
        raise ValueError(f"audio_target must be 'audio' or 'visual', got {audio_target!r}")
    l_c = softmax_cross_entropy(out.logits, labels)
    terms: dict[str, Tensor] = {}
    if align and lam != 0:
        if out.t is None:
            raise ValueError("alignment needs narration features from a train-mode forward")
        if out.ap is not None:
            terms["ap"] = alignment_pair_loss(out.ap, out.t, tau)
        if out.m is not None:
            terms["m"] = alignment_pair_loss(out.m, out.t, tau)
        if out.a is not None:
            target = out.t_hat if audio_target == "audio" else out.t
            if target is None:
                raise ValueError("audio alignment needs audio-narration features")
            terms["a"] = alignment_pair_loss(out.a, target, tau)

    if terms:
        vals = list(terms.values())
        l_align = vals[0]
        for v in vals[1:]:
            l_align = add(l_align, v)
        total = add(l_c, mul(l_align, Tensor(np.asarray(lam, dtype=l_align.dtype))))
    else:
        l_align = None
        total = l_c

    def f(t):
        return 0.0 if t is None else float(t.data)

    bd = LossBreakdown(
        L_c=f(l_c),
        L_ap_t=f(terms.get("ap")),
        L_m_t=f(terms.get("m")),
        L_a_t=f(terms.get("a")),
        L_align=f(l_align),
        total=f(total),
        lam=lam,
    )
    return total, bd
