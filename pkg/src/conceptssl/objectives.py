"""Self-supervised losses on concept-space score distributions.

Teacher-side quantities (its sharpened distribution and the significance
weight) are plain arrays: they never enter the tape, so gradients only reach
the student.  All losses accept a single score vector or a batch ``(B, n)``
and average over the batch.
"""

from __future__ import annotations

from dataclasses import dataclass, field

import numpy as np

from . import numerics as nx
from .errors import InvalidArgumentError

SPACES = ("C", "D")


@dataclass(frozen=True)
class ObjectiveConfig:
    lambda_teacher: float = 0.1
    lambda_student: float = 1.0
    tau: float = 0.5
    use_significance_weight: bool = True
    use_udp: bool = True
    use_description_space: bool = True
    use_alignment: bool = True
    udp_weight: float = 1.0
    udp_source: str = "student"
    udp_temperature: str = "lambda_teacher"

    @property
    def udp_lambda(self) -> float:
        return self.lambda_teacher if self.udp_temperature == "lambda_teacher" else self.lambda_student

    def __post_init__(self):
        if not self.lambda_teacher > 0:
            raise InvalidArgumentError("lambda_teacher must be positive")
        if not self.lambda_student > 0:
            raise InvalidArgumentError("lambda_student must be positive")
        if not 0 < self.tau <= 1:
            raise InvalidArgumentError("tau must lie in (0, 1]")
        if self.udp_weight < 0:
            raise InvalidArgumentError("udp_weight must be non-negative")
        if self.udp_source not in ("student", "teacher"):
            raise InvalidArgumentError("udp_source must be 'student' or 'teacher'")
        if self.udp_temperature not in ("lambda_teacher", "lambda_student"):
            raise InvalidArgumentError("udp_temperature must be 'lambda_teacher' or 'lambda_student'")


@dataclass
class MovingAverageState:
    """Running estimate of the dataset-mean score distribution, per space."""

    dists: dict = field(default_factory=dict)

    @classmethod
    def uniform(cls, sizes: dict) -> "MovingAverageState":
        return cls({k: np.full(n, 1.0 / n) for k, n in sizes.items()})

    def copy(self) -> "MovingAverageState":
        return MovingAverageState({k: v.copy() for k, v in self.dists.items()})

    def entropy(self, space: str) -> float:
        return nx.entropy(self.dists[space])


def sharpen(f_tilde, lam: float) -> nx.Tensor:
    return nx.softmax_temp(f_tilde, lam)


def _check_distribution(p: np.ndarray, what: str):
    if np.any(p < 0) or np.any(np.abs(p.sum(axis=-1) - 1.0) > 1e-6):
        raise InvalidArgumentError(f"{what} is not a probability distribution")


def significance_weight(f_hat_teacher):
    """Peak probability of the teacher distribution (per sample for a batch)."""
    p = np.asarray(f_hat_teacher, dtype=np.float64)
    _check_distribution(p, "teacher distribution")
    w = p.max(axis=-1)
    return float(w) if w.ndim == 0 else w


def _raw(x) -> np.ndarray:
    return np.asarray(x.data if isinstance(x, nx.Tensor) else x, dtype=np.float64)


def teacher_targets(f_tilde_teacher, cfg: ObjectiveConfig):
    """Sharpened teacher distribution and the weights applied to each sample."""
    p = nx.softmax_temp(_raw(f_tilde_teacher), cfg.lambda_teacher).data
    w = p.max(axis=-1) if cfg.use_significance_weight else np.ones(p.shape[:-1])
    return p, w


def cd_loss(f_tilde_teacher, f_tilde_student, cfg: ObjectiveConfig) -> nx.Tensor:
    """Significance-weighted cross-entropy from sharpened teacher to student scores."""
    t = _raw(f_tilde_teacher)
    s = nx.as_tensor(f_tilde_student)
    if t.shape != s.shape:
        raise InvalidArgumentError(f"teacher scores {t.shape} vs student scores {s.shape}")
    if not (np.all(np.isfinite(t)) and np.all(np.isfinite(s.data))):
        raise InvalidArgumentError("non-finite score vector")
    p, w = teacher_targets(t, cfg)
    log_q = nx.log_softmax_temp(s, cfg.lambda_student)
    per_sample = nx.sum(nx.mul(log_q, -(w[..., None] * p)), axis=-1)
    return nx.mean(per_sample)


def udp_step(ma_prev: np.ndarray, batch_mean, tau: float):
    """Pure form of the moving-average update: returns (loss, updated average).

    Gradient flows through ``tau * batch_mean``; the previous average is a constant.
    """
    batch_mean = nx.as_tensor(batch_mean)
    _check_distribution(batch_mean.data, "batch-mean distribution")
    ma = nx.add(nx.mul(batch_mean, tau), (1.0 - tau) * np.asarray(ma_prev))
    loss = nx.neg(nx.mean(nx.log(ma)))
    return loss, ma


def udp_update_and_loss(state: MovingAverageState, f_hat_student_batch_mean, space: str,
                        cfg: ObjectiveConfig) -> nx.Tensor:
    loss, ma = udp_step(state.dists[space], f_hat_student_batch_mean, cfg.tau)
    new = np.maximum(ma.data, nx.LOG_FLOOR)
    state.dists[space] = new / new.sum()
    return loss


def ca_loss(teacher_C, teacher_D, student_C, student_D, cfg: ObjectiveConfig) -> nx.Tensor:
    """Cross-space distillation: teacher C -> student D plus teacher D -> student C."""
    if _raw(teacher_C).shape[-1] != _raw(teacher_D).shape[-1]:
        raise InvalidArgumentError("category and description spaces differ in size")
    if nx.as_tensor(student_C).shape[-1] != nx.as_tensor(student_D).shape[-1]:
        raise InvalidArgumentError("category and description spaces differ in size")
    return nx.add(cd_loss(teacher_C, student_D, cfg), cd_loss(teacher_D, student_C, cfg))


def _udp_input(teacher, student, cfg: ObjectiveConfig):
    # Mean score distribution fed to the moving average.  At lambda_student the
    # softmax of cosines is nearly flat, so the sharper lambda_teacher is default.
    if cfg.udp_source == "teacher":
        p = nx.softmax_temp(_raw(teacher), cfg.udp_lambda).data
        return p.reshape(-1, p.shape[-1]).mean(axis=0)
    q = nx.softmax_temp(student, cfg.udp_lambda)
    if q.ndim == 1:
        return q
    return nx.mean(q, axis=0)


def total_loss(teacher_scores: dict, student_scores: dict, state: MovingAverageState,
               cfg: ObjectiveConfig, update_state: bool = True):
    """Combined objective and a labeled breakdown of its terms.

    ``teacher_scores``/``student_scores`` map "C" (and "D" when the description
    space or alignment is active) to raw cosine scores.  With
    ``update_state=False`` the moving averages are left untouched.
    """
    need_d = cfg.use_description_space or cfg.use_alignment
    spaces = ("C", "D") if need_d else ("C",)
    for k in spaces:
        if k not in teacher_scores or k not in student_scores:
            raise InvalidArgumentError(f"missing scores for space {k}")
    terms: dict[str, nx.Tensor] = {}
    new_ma = {}
    active = ("C", "D") if cfg.use_description_space else ("C",)
    for k in active:
        terms[f"L_CD_{k}"] = cd_loss(teacher_scores[k], student_scores[k], cfg)
        if cfg.use_udp:
            loss, ma = udp_step(state.dists[k], _udp_input(teacher_scores[k], student_scores[k], cfg), cfg.tau)
            terms[f"L_UP_{k}"] = nx.mul(loss, cfg.udp_weight)
            new_ma[k] = ma.data
    if cfg.use_alignment:
        terms["L_CA"] = ca_loss(teacher_scores["C"], teacher_scores["D"],
                                student_scores["C"], student_scores["D"], cfg)
    total = None
    for t in terms.values():
        total = t if total is None else nx.add(total, t)

    if update_state:
        for k, v in new_ma.items():
            v = np.maximum(v, nx.LOG_FLOOR)
            state.dists[k] = v / v.sum()

    p_teacher, _ = teacher_targets(teacher_scores["C"], cfg)
    p_teacher = p_teacher.reshape(-1, p_teacher.shape[-1])
    breakdown = {"L_total": total.item()}
    for name in ("L_CD_C", "L_UP_C", "L_CD_D", "L_UP_D", "L_CA"):
        breakdown[name] = terms[name].item() if name in terms else 0.0
    breakdown["w_s_mean"] = float(p_teacher.max(axis=-1).mean())
    for k in SPACES:
        breakdown[f"ma_entropy_{k}"] = state.entropy(k) if k in state.dists else 0.0
    breakdown["teacher_entropy_C"] = nx.entropy(p_teacher.mean(axis=0))
    return total, breakdown
