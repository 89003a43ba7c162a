"""Emergent communication: per-UE recurrent Q-networks (CNet) that exchange
learned symbol vectors with a BS network over the noisy uplink, trained end
to end with a deep Q-learning loss (gradients cross the channel)."""
from __future__ import annotations

import contextlib
import logging
from dataclasses import dataclass, field, asdict

import numpy as np

from . import autodiff as ad
from .autodiff import ParamSet, Tensor
from .channel import symbol_noise_std
from .env import N_ACTIONS, BatchEnv, Scenario, obs_dim

log = logging.getLogger(__name__)


class TrainingDiverged(RuntimeError):
    pass


@dataclass
class TrainConfig:
    episodes: int = 10000
    lr: float = 1e-4
    gamma: float = 1.0
    eps0: float = 0.05
    eps_decay: float = 0.999
    msg_len: int = 8
    target_sync_interval: int = 100
    batch_episodes: int = 32
    hidden_dim: int = 64
    enc_width: int = 128
    bs_hidden: int = 64
    seed: int = 0
    use_dest_delta: bool = True
    train_noise: bool = True

    def __post_init__(self):
        if not 0 <= self.eps0 <= 1:
            raise ValueError(f"eps0 must lie in [0, 1], got {self.eps0}")
        if not 0 < self.eps_decay <= 1:
            raise ValueError(f"eps_decay must lie in (0, 1], got {self.eps_decay}")
        if not 0 <= self.gamma <= 1:
            raise ValueError(f"gamma must lie in [0, 1], got {self.gamma}")
        if self.episodes < 0 or self.batch_episodes < 1 or self.target_sync_interval < 1:
            raise ValueError("episodes >= 0, batch_episodes >= 1, target_sync_interval >= 1")

    def to_dict(self):
        return asdict(self)


def epsilon_at(cfg: TrainConfig, n):
    return cfg.eps0 * cfg.eps_decay ** n


# ------------------------------------------------------------------ networks

def init_params(n_agents, in_dim, cfg: TrainConfig, seed=0, zero=False) -> ParamSet:
    """CNet weights stacked along a leading UE axis (one independent network
    per UE) plus the BS aggregator."""
    rng = np.random.default_rng(seed)
    J, H, E, M = n_agents, cfg.hidden_dim, cfg.enc_width, 2 * cfg.msg_len
    x_dim = in_dim + M + N_ACTIONS
    p = ParamSet()
    init = (lambda shape: np.zeros(shape)) if zero else (lambda shape: ad.glorot(rng, shape))
    p.add("cnet.enc1.w", init((J, x_dim, E)))
    p.add("cnet.enc1.b", np.zeros((J, 1, E)))
    p.add("cnet.enc2.w", init((J, E, E)))
    p.add("cnet.enc2.b", np.zeros((J, 1, E)))
    p.add("cnet.gru.wx", init((J, E, 3 * H)))
    p.add("cnet.gru.wh", init((J, H, 3 * H)))
    p.add("cnet.gru.bx", np.zeros((J, 1, 3 * H)))
    p.add("cnet.gru.bh", np.zeros((J, 1, 3 * H)))
    p.add("cnet.q.w", init((J, H, N_ACTIONS)))
    p.add("cnet.q.b", np.zeros((J, 1, N_ACTIONS)))
    p.add("cnet.msg.w", init((J, H, M)))
    p.add("cnet.msg.b", np.zeros((J, 1, M)))
    p.add("bs.l1.w", init((J * M, cfg.bs_hidden)))
    p.add("bs.l1.b", np.zeros((1, cfg.bs_hidden)))
    p.add("bs.l2.w", init((cfg.bs_hidden, M)))
    p.add("bs.l2.b", np.zeros((1, M)))
    return p


def normalize_message(raw, msg_len):
    """Scale each message so its ``msg_len`` complex symbols (interleaved
    re/im in the last axis) have unit average power."""
    power = ad.mul(ad.sum_(ad.square(raw), axis=-1, keepdims=True), 1.0 / msg_len)
    return ad.mul(raw, ad.power(ad.add(power, 1e-30), -0.5))


def cnet_forward(p: ParamSet, obs, hidden, dl_msg, prev_action):
    """One CNet step for every UE at once.

    obs (J, B, F), hidden (J, B, H), dl_msg (J, B, 2L), prev_action one-hot
    (J, B, 8).  Returns q-values (J, B, 8), next hidden and the normalized
    uplink message (J, B, 2L).
    """
    x = ad.concat([ad.as_tensor(obs), ad.as_tensor(dl_msg), ad.as_tensor(prev_action)], axis=-1)
    if x.shape[-1] != p["cnet.enc1.w"].shape[-2]:
        raise ad.ShapeError(f"CNet input width {x.shape[-1]} != {p['cnet.enc1.w'].shape[-2]}")
    e = ad.relu(ad.dense(x, p["cnet.enc1.w"], p["cnet.enc1.b"]))
    e = ad.relu(ad.dense(e, p["cnet.enc2.w"], p["cnet.enc2.b"]))
    h = ad.gru(p, "cnet.gru", e, ad.as_tensor(hidden))
    q = ad.dense(h, p["cnet.q.w"], p["cnet.q.b"])
    raw = ad.dense(h, p["cnet.msg.w"], p["cnet.msg.b"])
    msg_len = raw.shape[-1] // 2
    return q, h, normalize_message(raw, msg_len)


def bs_forward(p: ParamSet, ul_rx):
    """Aggregate received uplinks (J, B, 2L) into one broadcast downlink,
    returned replicated per UE as (J, B, 2L)."""
    J, B, M = ul_rx.shape
    x = ad.reshape(ad.transpose(ul_rx, (1, 0, 2)), (B, J * M))
    hdn = ad.relu(ad.dense(x, p["bs.l1.w"], p["bs.l1.b"]))
    dl = ad.dense(hdn, p["bs.l2.w"], p["bs.l2.b"])
    dl = ad.reshape(dl, (1, B, M))
    return ad.concat([dl] * J, axis=0) if J > 1 else dl


# ------------------------------------------------------------------ rollouts

@dataclass
class EpisodeRecord:
    """A lockstep batch of episodes; arrays are indexed [t, batch, ue]."""

    q: list                 # per step Tensor (J, B, 8)
    actions: np.ndarray
    rewards: np.ndarray     # task reward
    shaped: np.ndarray      # reward used for learning (with teacher bonus)
    alive: np.ndarray       # agent acting at t
    terminal: np.ndarray    # agent reached its destination at t
    next_qmax: np.ndarray   # max_a Q'(s_{t+1}, a)
    valid: np.ndarray
    weak: np.ndarray        # post-step cell is weak
    positions: np.ndarray   # (T+1, B, J, 2)
    teacher_hit: np.ndarray
    done: np.ndarray        # (B, J) arrived by the end

    @property
    def length(self):
        return len(self.q)

    def returns(self):
        return self.rewards.sum(axis=0)

    def travel_times(self):
        return self.alive.sum(axis=0)


def rollout(scenario: Scenario, params: ParamSet, cfg: TrainConfig, eps, rng, batch,
            train_mode=True, target: ParamSet | None = None, teacher_tables=None,
            bonus=0.0, noisy=None):
    """Run ``batch`` episodes in lockstep.

    With ``train_mode`` the online graph is retained (q tensors carry
    gradients through the uplink noise, which is added as a constant, and
    through the recurrent state).  ``target`` parameters, when given, run
    alongside on the same observations and noise to provide max_a Q'(s').
    """
    J, L = scenario.n_agents, cfg.msg_len
    M, H = 2 * L, cfg.hidden_dim
    env = BatchEnv(scenario.world, scenario.starts, scenario.dests, batch, scenario.eta,
                   cfg.use_dest_delta, scenario.t_max)
    noisy = cfg.train_noise if noisy is None else noisy
    noise_std = symbol_noise_std(scenario.budget) if noisy else 0.0
    hit_table = None if teacher_tables is None else teacher_tables[1]

    def zeros(*shape):
        return Tensor(np.zeros(shape))

    h, m_dn = zeros(J, batch, H), zeros(J, batch, M)
    th, tm_dn = zeros(J, batch, H), zeros(J, batch, M)
    prev = np.zeros((J, batch, N_ACTIONS))
    eye = np.eye(N_ACTIONS)
    qs, acts, rews, shaped, alive_l, term_l, valid_l, weak_l, hits = ([] for _ in range(9))
    tq_max = []
    positions = [env.pos.copy()]
    for t in range(scenario.t_max):
        obs = env.features()
        noise = rng.normal(0.0, 1.0, (J, batch, M)) * noise_std
        u = rng.random((batch, J))
        rand_a = rng.integers(0, N_ACTIONS, (batch, J))
        with (contextlib.nullcontext() if train_mode else ad.no_grad()):
            q, h, ul = cnet_forward(params, obs, h, m_dn, prev)
            m_dn = bs_forward(params, ad.add(ul, noise))
        if target is not None:
            with ad.no_grad():
                tq, th, tul = cnet_forward(target, obs, th, tm_dn, prev)
                tm_dn = bs_forward(target, ad.add(tul, noise))
            tq_max.append(tq.data.max(axis=-1).T)
        greedy = q.data.argmax(axis=-1).T  # (B, J), lowest index on ties
        a = np.where(u < eps, rand_a, greedy)
        alive = ~env.done
        valid, _ = env.step(a)
        r = env.rewards(valid, alive)
        if hit_table is not None:
            hit = hit_table[np.arange(J)[None, :], env.pos[..., 0], env.pos[..., 1]] & alive
        else:
            hit = np.zeros_like(alive)
        qs.append(q)
        acts.append(a)
        rews.append(r)
        shaped.append(env.rewards(valid, alive, hit, bonus))
        alive_l.append(alive)
        term_l.append(alive & env.done)
        valid_l.append(valid)
        weak_l.append(env.cell_weak() & alive)
        hits.append(hit)
        positions.append(env.pos.copy())
        prev = eye[a].transpose(1, 0, 2)
        if env.all_done:
            break
    if target is not None:
        with ad.no_grad():
            tq, _, _ = cnet_forward(target, env.features(), th, tm_dn, prev)
        tq_max.append(tq.data.max(axis=-1).T)
        next_qmax = np.stack(tq_max[1:])
    else:
        next_qmax = np.zeros((len(qs), batch, J))
    return EpisodeRecord(
        q=qs, actions=np.stack(acts), rewards=np.stack(rews), shaped=np.stack(shaped),
        alive=np.stack(alive_l), terminal=np.stack(term_l), next_qmax=next_qmax,
        valid=np.stack(valid_l), weak=np.stack(weak_l), positions=np.stack(positions),
        teacher_hit=np.stack(hits), done=env.done.copy())


def td_loss(q_taken, rewards, next_qmax, terminal, mask, gamma):
    """Sum of squared TD errors; ``q_taken`` is a Tensor, the rest constants
    of the same shape.  Terminal steps do not bootstrap."""
    y = rewards + gamma * np.where(terminal, 0.0, next_qmax)
    err = ad.sub(q_taken, y)
    return ad.sum_(ad.mul(ad.square(err), mask.astype(np.float64)))


def taken_q(q, actions):
    """q (J, B, 8) Tensor, actions (B, J) -> (J, B) Tensor."""
    onehot = np.eye(N_ACTIONS)[actions].transpose(1, 0, 2)
    return ad.sum_(ad.mul(q, onehot), axis=-1)


def dqn_loss(record: EpisodeRecord, gamma, shaped=True):
    """Deep Q-learning loss summed over UEs and steps, averaged over the
    episodes of the batch."""
    batch = record.actions.shape[1]
    rewards = record.shaped if shaped else record.rewards
    terms = []
    for t, q in enumerate(record.q):
        terms.append(td_loss(taken_q(q, record.actions[t]), rewards[t].T, record.next_qmax[t].T,
                             record.terminal[t].T, record.alive[t].T, gamma))
    total = terms[0]
    for term in terms[1:]:
        total = ad.add(total, term)
    return ad.mul(total, 1.0 / batch)


# ------------------------------------------------------------------ training

@dataclass
class TrainResult:
    params: ParamSet
    curve: list = field(default_factory=list)  # dict rows per training episode

    @property
    def returns(self):
        return np.array([row["mean_return"] for row in self.curve])


def train_ec(cfg: TrainConfig, scenario: Scenario, callback=None) -> TrainResult:
    return train(cfg, scenario, loss_fn=None, callback=callback)


def train(cfg: TrainConfig, scenario: Scenario, loss_fn=None, teacher_tables=None, bonus=0.0,
          callback=None, params=None) -> TrainResult:
    """Shared EC/LEC loop.  Each training episode runs ``batch_episodes``
    parallel rollouts, takes one Adam step and decays epsilon.

    ``loss_fn(record)`` returns ``(loss Tensor, extra_columns)``; the default
    is the plain deep Q-learning loss.
    """
    rng = np.random.default_rng(cfg.seed)
    in_dim = obs_dim(scenario.world, cfg.use_dest_delta)
    if params is None:
        params = init_params(scenario.n_agents, in_dim, cfg, seed=cfg.seed)
    target = params.clone()
    result = TrainResult(params)
    for n in range(cfg.episodes):
        eps = epsilon_at(cfg, n)
        rec = rollout(scenario, params, cfg, eps, rng, cfg.batch_episodes, train_mode=True,
                      target=target, teacher_tables=teacher_tables, bonus=bonus)
        if loss_fn is None:
            loss, extra = dqn_loss(rec, cfg.gamma), {}
        else:
            loss, extra = loss_fn(rec)
        mean_ret = float(rec.returns().mean())
        if not np.isfinite(mean_ret) or not np.isfinite(loss.data):
            raise TrainingDiverged(f"episode {n}: mean return {mean_ret}, loss {float(loss.data)}")
        loss.backward()
        ad.adam_step(params, cfg.lr)
        if (n + 1) % cfg.target_sync_interval == 0:
            target.load_values(params)
        row = {"episode": n, "mean_return": mean_ret, "epsilon": eps, "loss": float(loss.data)}
        row.update(extra)
        result.curve.append(row)
        if callback is not None:
            callback(row)
    return result


def evaluate(scenario: Scenario, params: ParamSet, cfg: TrainConfig, episodes, seed, noisy=True):
    """Greedy (epsilon = 0) rollouts without gradients."""
    rng = np.random.default_rng(seed)
    return rollout(scenario, params, cfg, 0.0, rng, episodes, train_mode=False, noisy=noisy)
