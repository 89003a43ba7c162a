"""Language-guided EC: distill refined teacher trajectories into the EC
learner with a KL term on teacher-covered cells and a path-following reward
bonus."""
from __future__ import annotations

from dataclasses import dataclass, field

import numpy as np

from . import autodiff as ad
from .ec import EpisodeRecord, TrainConfig, TrainResult, dqn_loss, train
from .env import N_ACTIONS, Scenario
from .teacher import TeacherKnowledge


@dataclass
class KdConfig:
    lam: float = 1.0
    smoothing_eps: float = 1e-3
    bonus: float = 0.1
    train: TrainConfig = field(default_factory=TrainConfig)

    def __post_init__(self):
        if self.lam < 0:
            raise ValueError(f"lam must be >= 0, got {self.lam}")
        if not 0 < self.smoothing_eps < 1 / N_ACTIONS:
            raise ValueError(f"smoothing_eps must lie in (0, 1/8), got {self.smoothing_eps}")


@dataclass
class TeacherPdf:
    probs: np.ndarray
    support_hit: bool


def teacher_pdf(knowledge: TeacherKnowledge, ue, pos) -> TeacherPdf:
    """Frequency of each action recorded at ``pos`` across the selected
    trajectories of UE ``ue``; all zeros when the cell was never visited."""
    occ = knowledge.index[ue].get(tuple(pos), [])
    probs = np.zeros(N_ACTIONS)
    if not occ:
        return TeacherPdf(probs, False)
    for _, _, a in occ:
        probs[a] += 1
    return TeacherPdf(probs / len(occ), True)


def smooth_pdf(probs, eps):
    return (np.asarray(probs) + eps) / (1.0 + N_ACTIONS * eps)


def kd_term(q_values, pdf: TeacherPdf, smoothing_eps=1e-3):
    """KL(softmax(q) || smoothed teacher pdf); exactly zero without support."""
    if not pdf.support_hit:
        return ad.Tensor(0.0)
    return ad.kld(q_values, smooth_pdf(pdf.probs, smoothing_eps))


def kd_loss(record: EpisodeRecord, tables, smoothing_eps):
    """Sum of per-step KL terms over teacher-covered (UE, step) pairs.

    Returns the summed Tensor and the mean KL over covered pairs (0 if none).
    """
    probs, hit_table = tables
    J = probs.shape[0]
    j_idx = np.arange(J)[None, :]
    q_smooth = smooth_pdf(probs, smoothing_eps)
    total, covered, kl_sum = None, 0, 0.0
    for t, q in enumerate(record.q):
        x, y = record.positions[t][..., 0], record.positions[t][..., 1]
        mask = (hit_table[j_idx, x, y] & record.alive[t]).T  # (J, B)
        target = q_smooth[j_idx, x, y].transpose(1, 0, 2)    # (J, B, 8)
        kl = ad.kld(q, target)
        term = ad.sum_(ad.mul(kl, mask.astype(np.float64)))
        total = term if total is None else ad.add(total, term)
        covered += int(mask.sum())
        kl_sum += float((kl.data * mask).sum())
    return total, (kl_sum / covered if covered else 0.0)


def lec_loss(record: EpisodeRecord, gamma, tables, kd: KdConfig):
    """Deep Q loss on the shaped reward plus ``lam`` times the KL terms."""
    batch = record.actions.shape[1]
    q_loss = dqn_loss(record, gamma, shaped=True)
    kl_total, kl_mean = kd_loss(record, tables, kd.smoothing_eps)
    loss = ad.add(q_loss, ad.mul(kl_total, kd.lam / batch))
    return loss, kl_mean


def train_lec(kd: KdConfig, scenario: Scenario, knowledge: TeacherKnowledge,
              callback=None) -> TrainResult:
    tables = knowledge.tables(scenario.world.width, scenario.world.height)
    cfg = kd.train

    def loss_fn(rec):
        loss, kl_mean = lec_loss(rec, cfg.gamma, tables, kd)
        return loss, {"kld_mean": kl_mean}

    return train(cfg, scenario, loss_fn=loss_fn, teacher_tables=tables, bonus=kd.bonus,
                 callback=callback)
