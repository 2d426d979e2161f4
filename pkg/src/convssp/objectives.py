"""The four training losses and their weighted combination.

Topic segmentation and coreference identification use mean binary
cross-entropy over utterances.  Word reconstruction and knowledge
distillation use the Euclidean norm of the difference vector, as written;
``squared_norms`` switches both to the mean-squared-error reading.

The combined objective is::

    l_final = l_kd + alpha * l_ts + beta * l_ci + gamma * l_wr

with masked terms contributing an exact zero.
"""

from __future__ import annotations

from dataclasses import dataclass

import numpy as np

from . import autodiff as ad
from .autodiff import Tensor

PROB_EPS = 1e-9


@dataclass(frozen=True)
class LossWeights:
    """Trade-off weights for the self-supervised terms (defaults follow the
    CAsT-19 configuration)."""

    alpha: float = 1e-2
    beta: float = 1e-3
    gamma: float = 1e-2

    def __post_init__(self):
        for name in ("alpha", "beta", "gamma"):
            v = getattr(self, name)
            if not np.isfinite(v) or v < 0:
                raise ValueError(f"{name} must be finite and >= 0, got {v}")


@dataclass
class LossReport:
    """Scalar values of every term for one step, masked terms reported as 0."""

    l_ts: float
    l_ci: float
    l_wr: float
    l_kd: float
    l_final: float
    masks: dict[str, bool]

    CSV_HEADER = "step,l_ts,l_ci,l_wr,l_kd,l_final"

    def csv_row(self, step: int) -> str:
        return (
            f"{step},{self.l_ts!r},{self.l_ci!r},{self.l_wr!r},"
            f"{self.l_kd!r},{self.l_final!r}"
        )


def _as_tensor(x) -> Tensor:
    return x if isinstance(x, Tensor) else Tensor(np.asarray(x, dtype=np.float64))


def _bce_mean(probabilities, labels) -> Tensor:
    p = _as_tensor(probabilities)
    y = np.asarray(labels, dtype=np.float64)
    if p.data.shape != y.shape:
        raise ValueError(f"length mismatch: probs {p.data.shape} vs labels {y.shape}")
    if y.size == 0:
        raise ValueError("cannot take BCE of an empty vector")
    p = ad.clip(p, PROB_EPS, 1.0 - PROB_EPS)
    term = ad.mul(Tensor(y), ad.log(p)) + ad.mul(Tensor(1.0 - y), ad.log(1.0 - p))
    return -term.mean()


def loss_ts(probabilities, topic_labels) -> Tensor:
    """Topic-segmentation loss: mean BCE over all utterances."""
    return _bce_mean(probabilities, topic_labels)


def loss_ci(probabilities, coref_label) -> Tensor:
    """Coreference-identification loss: mean BCE over context utterances."""
    return _bce_mean(probabilities, coref_label)


def _norm_loss(a, b, squared: bool) -> Tensor:
    a, b = _as_tensor(a), _as_tensor(b)
    if a.data.shape != b.data.shape:
        raise ValueError(f"length mismatch: {a.data.shape} vs {b.data.shape}")
    if squared:
        diff = a - b
        return ad.mul(diff, diff).mean()
    return ad.euclidean_distance(a, b)


def loss_wr(reconstruction, bow_target, squared: bool = False) -> Tensor:
    """Word-reconstruction loss: ||y_hat - y||_2 over the vocabulary."""
    return _norm_loss(reconstruction, bow_target, squared)


def loss_kd(student_cls, teacher_cls, squared: bool = False) -> Tensor:
    """Distillation loss: Euclidean distance between the two [CLS] vectors."""
    return _norm_loss(student_cls, teacher_cls, squared)


def loss_final(
    l_ts_value: Tensor | None,
    l_ci_value: Tensor | None,
    l_wr_value: Tensor | None,
    l_kd_value: Tensor | None,
    weights: LossWeights,
    masks: dict[str, bool],
) -> tuple[Tensor, LossReport]:
    """Combine the four terms; masked (or absent) terms contribute exactly 0.

    Returns the differentiable total together with a per-term report.
    """
    zero = Tensor(0.0)

    def pick(value: Tensor | None, active: bool) -> Tensor:
        return value if (active and value is not None) else zero

    ts = pick(l_ts_value, masks.get("topic", False))
    ci = pick(l_ci_value, masks.get("coref", False))
    wr = pick(l_wr_value, masks.get("wr", False))
    kd = pick(l_kd_value, masks.get("kd", False))
    total = kd + weights.alpha * ts + weights.beta * ci + weights.gamma * wr
    report = LossReport(
        l_ts=ts.item(),
        l_ci=ci.item(),
        l_wr=wr.item(),
        l_kd=kd.item(),
        l_final=total.item(),
        masks=dict(masks),
    )
    return total, report
