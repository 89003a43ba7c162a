"""Grid-world multi-UE navigation task.

Coordinates are ``(x, y)`` with east = +x and north = +y; every per-cell array
is indexed ``[x, y]``.
"""
from __future__ import annotations

import json
from dataclasses import dataclass, field
from pathlib import Path

import numpy as np

from .channel import ChannelMap, LinkBudget

T_MAX = 50

# Action order follows the displacement list (-v,-v), (-v,0), ..., (v,v).
ACTIONS = np.array([(-1, -1), (-1, 0), (-1, 1), (0, -1), (0, 1), (1, -1), (1, 0), (1, 1)])
ACTION_WORDS = ("southwest", "west", "northwest", "south", "north", "southeast", "east", "northeast")
N_ACTIONS = len(ACTIONS)

# local location map codes
FREE, BUILDING, OUTSIDE, OTHER_UE, DEST = range(5)
N_LOC_CODES = 5
PATCH_OFFSETS = np.array([(dx, dy) for dx in (-1, 0, 1) for dy in (-1, 0, 1)])

REWARD_WEIGHTS = np.array([10.0, -0.1, -0.1, -0.01, 0.1])


class ConfigError(ValueError):
    pass


def action_index(displacement, v=1):
    d = tuple(int(c) // v for c in displacement)
    for i, a in enumerate(ACTIONS):
        if tuple(a) == d:
            return i
    raise ValueError(f"not a move: {displacement}")


@dataclass
class GridWorld:
    width: int
    height: int
    buildings: np.ndarray
    bs: tuple
    channel: ChannelMap
    v: int = 1

    def __post_init__(self):
        self.buildings = np.asarray(self.buildings, dtype=bool)
        self.bs = tuple(int(c) for c in self.bs)
        if self.buildings.shape != (self.width, self.height):
            raise ConfigError(f"building mask shape {self.buildings.shape} != {(self.width, self.height)}")
        if self.channel.shape != (self.width, self.height):
            raise ConfigError(f"channel map shape {self.channel.shape} != {(self.width, self.height)}")
        if not self.inside(self.bs):
            raise ConfigError(f"BS position {self.bs} outside the grid")

    def inside(self, cell):
        return 0 <= cell[0] < self.width and 0 <= cell[1] < self.height

    def free(self, cell):
        return self.inside(cell) and not self.buildings[cell[0], cell[1]]

    def weak_mask(self, eta):
        return self.channel.gains < eta

    # JSON map file: gains/buildings given with rows = y
    def to_json(self):
        return {
            "width": self.width,
            "height": self.height,
            "buildings": [[int(x), int(y)] for x, y in zip(*np.nonzero(self.buildings))],
            "bs": list(self.bs),
            "gains": self.channel.gains.T.tolist(),
        }

    def save(self, path):
        Path(path).write_text(json.dumps(self.to_json()))

    @classmethod
    def from_json(cls, blob):
        try:
            w, h = int(blob["width"]), int(blob["height"])
            gains = np.asarray(blob["gains"], dtype=np.float64)
            bs = blob["bs"]
        except KeyError as e:
            raise ConfigError(f"map file missing field {e.args[0]!r}") from None
        if gains.ndim == 1:
            if gains.size != w * h:
                raise ConfigError(f"gains has {gains.size} values, expected {w * h}")
            gains = gains.reshape(h, w)
        if gains.shape != (h, w):
            raise ConfigError(f"gains shape {gains.shape} != (height, width) = {(h, w)}")
        buildings = np.zeros((w, h), dtype=bool)
        for x, y in blob.get("buildings", []):
            if not (0 <= x < w and 0 <= y < h):
                raise ConfigError(f"building cell {(x, y)} outside the grid")
            buildings[x, y] = True
        return cls(w, h, buildings, tuple(bs), ChannelMap(gains.T.copy()))

    @classmethod
    def load(cls, path):
        return cls.from_json(json.loads(Path(path).read_text()))


@dataclass
class AgentState:
    pos: tuple
    dest: tuple
    visited: list = field(default_factory=list)
    done: bool = False
    steps: int = 0


@dataclass
class Observation:
    local_loc: np.ndarray   # (3, 3) codes, [dx+1, dy+1]
    local_chan: np.ndarray  # (3, 3) 1 = weak
    traj_img: np.ndarray    # (W, H) visited cells
    dest_delta: np.ndarray  # (2,) normalized


def reset(world: GridWorld, starts, dests, seed=None):
    if len(starts) != len(dests):
        raise ConfigError(f"{len(starts)} starts but {len(dests)} destinations")
    agents = []
    for j, (s, d) in enumerate(zip(starts, dests)):
        s, d = tuple(int(c) for c in s), tuple(int(c) for c in d)
        for what, cell in (("start", s), ("destination", d)):
            if not world.free(cell):
                raise ConfigError(f"UE {j}: {what} {cell} is outside the grid or inside a building")
        agents.append(AgentState(pos=s, dest=d, visited=[s], done=s == d))
    seen = {}
    for j, a in enumerate(agents):
        if a.pos in seen:
            raise ConfigError(f"UE {j}: start {a.pos} coincides with UE {seen[a.pos]}")
        seen[a.pos] = j
    return agents


def step(world: GridWorld, agents, actions):
    """Advance every live agent by one action.

    ``actions`` holds one action index per agent (ignored for finished ones).
    Agents are resolved in index order: a move is invalid if its target is
    outside the grid, a building, the new cell of an already-resolved agent,
    or the current cell of a not-yet-resolved live agent (this also rules out
    swaps).  Finished agents have left the grid and never block.

    Returns a list of ``(AgentState, valid)``; finished agents report
    ``valid=True`` and are returned unchanged.
    """
    n = len(agents)
    new_pos = [a.pos for a in agents]
    valid = [True] * n
    for j, a in enumerate(agents):
        if a.done:
            continue
        dx, dy = ACTIONS[actions[j]] * world.v
        cand = (a.pos[0] + int(dx), a.pos[1] + int(dy))
        blocked = not world.free(cand)
        blocked |= any(new_pos[i] == cand for i in range(j) if not agents[i].done)
        blocked |= any(agents[k].pos == cand for k in range(j + 1, n) if not agents[k].done)
        if blocked:
            valid[j] = False
        else:
            new_pos[j] = cand
    out = []
    for j, a in enumerate(agents):
        if a.done:
            out.append((a, True))
            continue
        pos = new_pos[j]
        out.append((AgentState(pos=pos, dest=a.dest, visited=a.visited + [pos],
                               done=pos == a.dest, steps=a.steps + 1), valid[j]))
    return out


def reward_indicators(agent: AgentState, valid, weak, teacher_hit=False, teacher_bonus_enabled=False):
    at_dest = agent.pos == agent.dest
    return np.array([at_dest, not valid, weak, not at_dest,
                     teacher_hit and teacher_bonus_enabled], dtype=np.float64)


def reward(agent: AgentState, valid, weak, teacher_hit=False, teacher_bonus_enabled=False,
           bonus=0.1):
    """Task reward evaluated at the agent's post-step cell, plus the optional
    teacher-path bonus."""
    at_dest = agent.pos == agent.dest
    hit = bool(teacher_bonus_enabled and teacher_hit)
    return float(_reward_cents(at_dest, not valid, weak, hit, bonus))


def _reward_cents(at_dest, invalid, weak, hit, bonus):
    # summed in hundredths so that tabulated decimals (-0.21, 0.09, ...) come
    # out as the nearest double rather than an accumulated rounding error
    cents = (1000 * np.asarray(at_dest, dtype=np.int64) - 10 * np.asarray(invalid, dtype=np.int64)
             - 10 * np.asarray(weak, dtype=np.int64) - 1 * ~np.asarray(at_dest, dtype=bool))
    return (cents + round(bonus * 100, 9) * np.asarray(hit)) / 100.0


def observe(world: GridWorld, agents, j, eta):
    me = agents[j]
    weak = world.weak_mask(eta)
    loc = np.zeros((3, 3), dtype=np.int64)
    chan = np.zeros((3, 3), dtype=np.int64)
    others = {a.pos for i, a in enumerate(agents) if i != j and not a.done}
    for dx, dy in PATCH_OFFSETS:
        c = (me.pos[0] + dx, me.pos[1] + dy)
        if not world.inside(c):
            code = OUTSIDE
        elif world.buildings[c]:
            code = BUILDING
        elif c in others:
            code = OTHER_UE
        elif c == me.dest:
            code = DEST
        else:
            code = FREE
        loc[dx + 1, dy + 1] = code
        if world.inside(c) and weak[c]:
            chan[dx + 1, dy + 1] = 1
    traj = np.zeros((world.width, world.height))
    for c in me.visited:
        traj[c] = 1.0
    delta = np.array([(me.dest[0] - me.pos[0]) / max(world.width - 1, 1),
                      (me.dest[1] - me.pos[1]) / max(world.height - 1, 1)])
    return Observation(loc, chan, traj, delta)


def obs_dim(world: GridWorld, use_dest_delta=True):
    return 9 * N_LOC_CODES + 9 + world.width * world.height + (2 if use_dest_delta else 0)


def encode_observation(obs: Observation, use_dest_delta=True):
    onehot = np.eye(N_LOC_CODES)[obs.local_loc.ravel()].ravel()
    parts = [onehot, obs.local_chan.ravel().astype(np.float64), obs.traj_img.ravel()]
    if use_dest_delta:
        parts.append(obs.dest_delta)
    return np.concatenate(parts)


class BatchEnv:
    """``batch`` independent copies of one scenario stepped in lockstep.

    Same dynamics as :func:`step`/:func:`observe`, vectorized over episodes.
    """

    def __init__(self, world: GridWorld, starts, dests, batch, eta, use_dest_delta=True,
                 t_max=T_MAX):
        reset(world, starts, dests)  # validation
        self.world = world
        self.batch = batch
        self.n = len(starts)
        self.eta = eta
        self.t_max = t_max
        self.use_dest_delta = use_dest_delta
        self.dests = np.asarray(dests, dtype=np.int64)
        self.pos = np.tile(np.asarray(starts, dtype=np.int64), (batch, 1, 1))
        self.done = np.tile((self.pos[0] == self.dests).all(-1), (batch, 1))
        self.steps = np.zeros((batch, self.n), dtype=np.int64)
        self.t = 0
        W, H = world.width, world.height
        self.visited = np.zeros((batch, self.n, W, H))
        b_idx = np.arange(batch)[:, None]
        j_idx = np.arange(self.n)[None, :]
        self.visited[b_idx, j_idx, self.pos[..., 0], self.pos[..., 1]] = 1.0
        self.weak = world.weak_mask(eta)
        self.free = ~world.buildings
        # static patch tables
        pad_loc = np.full((W + 2, H + 2), OUTSIDE, dtype=np.int64)
        pad_loc[1:-1, 1:-1] = np.where(world.buildings, BUILDING, FREE)
        pad_chan = np.zeros((W + 2, H + 2))
        pad_chan[1:-1, 1:-1] = self.weak
        xs, ys = np.meshgrid(np.arange(W), np.arange(H), indexing="ij")
        px = xs[..., None] + 1 + PATCH_OFFSETS[:, 0]
        py = ys[..., None] + 1 + PATCH_OFFSETS[:, 1]
        self._loc_table = pad_loc[px, py]    # (W, H, 9)
        self._chan_table = pad_chan[px, py]  # (W, H, 9)

    @property
    def all_done(self):
        return bool(self.done.all())

    def cell_weak(self):
        return self.weak[self.pos[..., 0], self.pos[..., 1]]

    def features(self):
        """Observation encodings, shape (n_agents, batch, obs_dim)."""
        B, J = self.batch, self.n
        x, y = self.pos[..., 0], self.pos[..., 1]
        loc = self._loc_table[x, y].copy()  # (B, J, 9)
        chan = self._chan_table[x, y]
        off = PATCH_OFFSETS
        # destination marker, then other live UEs on top
        dd = self.dests[None, :, :] - self.pos  # (B, J, 2)
        for k in range(9):
            hit = (dd[..., 0] == off[k, 0]) & (dd[..., 1] == off[k, 1])
            loc[..., k] = np.where(hit & (loc[..., k] == FREE), DEST, loc[..., k])
        for j in range(J):
            for i in range(J):
                if i == j:
                    continue
                rel = self.pos[:, i] - self.pos[:, j]
                live = ~self.done[:, i]
                for k in range(9):
                    hit = live & (rel[:, 0] == off[k, 0]) & (rel[:, 1] == off[k, 1])
                    cur = loc[:, j, k]
                    loc[:, j, k] = np.where(hit & ((cur == FREE) | (cur == DEST)), OTHER_UE, cur)
        onehot = np.eye(N_LOC_CODES)[loc].reshape(B, J, -1)
        parts = [onehot, chan, self.visited.reshape(B, J, -1)]
        if self.use_dest_delta:
            W, H = self.world.width, self.world.height
            parts.append(dd / np.array([max(W - 1, 1), max(H - 1, 1)]))
        return np.concatenate(parts, axis=-1).transpose(1, 0, 2)

    def step(self, actions):
        """``actions``: int array (batch, n_agents).  Returns (valid, moved_alive)
        where ``moved_alive`` marks agents that were live before the step."""
        B, J = self.batch, self.n
        W, H = self.world.width, self.world.height
        alive = ~self.done
        new_pos = self.pos.copy()
        valid = np.ones((B, J), dtype=bool)
        for j in range(J):
            cand = self.pos[:, j] + ACTIONS[actions[:, j]] * self.world.v
            inside = (cand[:, 0] >= 0) & (cand[:, 0] < W) & (cand[:, 1] >= 0) & (cand[:, 1] < H)
            cx = np.clip(cand[:, 0], 0, W - 1)
            cy = np.clip(cand[:, 1], 0, H - 1)
            blocked = ~inside | ~self.free[cx, cy]
            for i in range(j):
                blocked |= alive[:, i] & (new_pos[:, i] == cand).all(-1)
            for k in range(j + 1, J):
                blocked |= alive[:, k] & (self.pos[:, k] == cand).all(-1)
            ok = alive[:, j] & ~blocked
            valid[:, j] = ~alive[:, j] | ok
            new_pos[ok, j] = cand[ok]
        self.pos = new_pos
        b_idx, j_idx = np.nonzero(alive)
        self.visited[b_idx, j_idx, new_pos[b_idx, j_idx, 0], new_pos[b_idx, j_idx, 1]] = 1.0
        self.steps += alive
        self.done = self.done | (new_pos == self.dests[None]).all(-1)
        self.t += 1
        return valid, alive

    def rewards(self, valid, alive, bonus_hit=None, bonus=0.0):
        at_dest = (self.pos == self.dests[None]).all(-1)
        hit = np.zeros_like(at_dest) if bonus_hit is None else bonus_hit
        r = _reward_cents(at_dest, ~valid, self.cell_weak(), hit, bonus)
        return np.where(alive, r, 0.0)


@dataclass
class Scenario:
    """A map, a UE roster and the uplink budget shared by every scheme."""

    world: GridWorld
    starts: list
    dests: list
    budget: LinkBudget
    t_max: int = T_MAX

    def __post_init__(self):
        self.starts = [tuple(int(c) for c in s) for s in self.starts]
        self.dests = [tuple(int(c) for c in d) for d in self.dests]
        reset(self.world, self.starts, self.dests)

    @property
    def n_agents(self):
        return len(self.starts)

    @property
    def eta(self):
        return self.budget.eta

    def weak_mask(self):
        return self.world.weak_mask(self.budget.eta)
