"""Teacher side of the distillation pipeline.

Two teachers produce multi-UE episodes: a language-model controller fed
with rendered text reports (any HTTP completion endpoint, or an in-process
double), and a prioritized time-expanded planner used for desk-scale runs.
Episodes are refined (invalid steps and loops removed) and the best ``L``
are kept as teacher knowledge.
"""
from __future__ import annotations

import json
import logging
import re
import urllib.error
import urllib.request
from dataclasses import dataclass, field
from pathlib import Path

import numpy as np

from .channel import transmit_text
from .env import (ACTION_WORDS, ACTIONS, BUILDING, DEST, N_ACTIONS, OTHER_UE, OUTSIDE,
                  PATCH_OFFSETS, Scenario, action_index, observe, reset, step)

log = logging.getLogger(__name__)


class PlannerFailure(RuntimeError):
    pass


class TeacherUnavailable(RuntimeError):
    pass


class SelectionError(ValueError):
    pass


# ------------------------------------------------------------------ trajectories

@dataclass
class Trajectory:
    """(cell, effective displacement) pairs of one UE; ``(0, 0)`` marks a
    step whose action was absorbed.  ``final`` is the cell after the last
    pair."""

    ue: int
    pairs: list
    final: tuple | None = None

    def __post_init__(self):
        self.pairs = [(tuple(int(c) for c in z), tuple(int(c) for c in a)) for z, a in self.pairs]
        if self.final is None and self.pairs:
            (x, y), (dx, dy) = self.pairs[-1]
            self.final = (x + dx, y + dy)
        elif self.final is not None:
            self.final = tuple(int(c) for c in self.final)

    def __len__(self):
        return len(self.pairs)

    def cells(self):
        return [z for z, _ in self.pairs] + ([self.final] if self.final is not None else [])

    def consistent(self):
        seq = self.cells()
        return all((z[0] + a[0], z[1] + a[1]) == seq[i + 1] for i, (z, a) in enumerate(self.pairs))

    def to_record(self, episode):
        return {"episode": episode, "ue": self.ue,
                "pairs": [[z[0], z[1], a[0], a[1]] for z, a in self.pairs],
                "final": list(self.final) if self.final is not None else None}

    @classmethod
    def from_record(cls, rec):
        pairs = [((p[0], p[1]), (p[2], p[3])) for p in rec["pairs"]]
        return cls(rec["ue"], pairs, rec.get("final"))


@dataclass
class TeacherEpisode:
    trajectories: list  # one Trajectory per UE
    finished: bool = True

    @property
    def lengths(self):
        return [len(t) for t in self.trajectories]


def refine(traj: Trajectory) -> Trajectory:
    """Drop absorbed steps, then cut loops until no cell repeats.

    A loop is cut at the earliest cell that recurs, back to its last
    recurrence, so ``A B C B D A E`` collapses to ``A E``.
    """
    pairs = [(z, a) for z, a in traj.pairs if a != (0, 0)]
    final = traj.final
    while True:
        cells = [z for z, _ in pairs] + [final]
        last = {}
        for i, c in enumerate(cells):
            last[c] = i
        cut = next(((i, last[c]) for i, c in enumerate(cells) if last[c] > i), None)
        if cut is None:
            break
        t1, t2 = cut
        pairs = pairs[:t1] + pairs[t2:]
    return Trajectory(traj.ue, pairs, final)


def write_episodes(path, episodes):
    with open(path, "w") as fh:
        for n, ep in enumerate(episodes):
            for traj in ep.trajectories:
                fh.write(json.dumps({**traj.to_record(n), "finished": ep.finished}) + "\n")


def read_episodes(path):
    by_ep, finished = {}, {}
    for line in Path(path).read_text().splitlines():
        if line.strip():
            rec = json.loads(line)
            by_ep.setdefault(rec["episode"], []).append(Trajectory.from_record(rec))
            finished[rec["episode"]] = finished.get(rec["episode"], True) and rec.get("finished", True)
    return [TeacherEpisode(sorted(v, key=lambda t: t.ue), finished[n]) for n, v in sorted(by_ep.items())]


# ------------------------------------------------------------------ selection

def episode_score(ep: TeacherEpisode, scenario: Scenario):
    """Longest per-UE episode length plus the total uplink transmit power
    spent on the way (channel inversion at every visited cell)."""
    gains = scenario.world.channel.gains
    power = sum(scenario.budget.p_r / gains[z] for traj in ep.trajectories for z, _ in traj.pairs)
    return max(ep.lengths) + power


@dataclass
class TeacherKnowledge:
    episodes: list        # selected TeacherEpisode, refined, in selection order
    picked: list          # original episode indices
    scores: list          # scores used for selection
    refined_scores: list  # same formula on the refined trajectories (reporting only)
    n_agents: int
    index: list = field(default_factory=list)  # per UE: cell -> [(rank, step, action)]

    def __post_init__(self):
        if not self.index:
            self.index = build_index(self.episodes, self.n_agents)

    def hit(self, ue, cell):
        return tuple(cell) in self.index[ue]

    def tables(self, width, height):
        """Dense per-UE lookup: action frequencies (J, W, H, 8) and coverage
        mask (J, W, H)."""
        counts = np.zeros((self.n_agents, width, height, N_ACTIONS))
        for j, idx in enumerate(self.index):
            for (x, y), occ in idx.items():
                for _, _, a in occ:
                    counts[j, x, y, a] += 1
        total = counts.sum(-1, keepdims=True)
        hit = total[..., 0] > 0
        probs = np.divide(counts, total, out=np.zeros_like(counts), where=total > 0)
        return probs, hit

    def save(self, directory):
        d = Path(directory)
        d.mkdir(parents=True, exist_ok=True)
        write_episodes(d / "selected.jsonl", self.episodes)
        (d / "selection.json").write_text(json.dumps({
            "picked": self.picked, "scores": self.scores,
            "refined_scores": self.refined_scores, "n_agents": self.n_agents}, indent=1))

    @classmethod
    def load(cls, directory):
        d = Path(directory)
        meta = json.loads((d / "selection.json").read_text())
        return cls(read_episodes(d / "selected.jsonl"), meta["picked"], meta["scores"],
                   meta["refined_scores"], meta["n_agents"])

    @classmethod
    def empty(cls, n_agents):
        return cls([], [], [], [], n_agents)


def build_index(episodes, n_agents):
    index = [dict() for _ in range(n_agents)]
    for rank, ep in enumerate(episodes):
        for traj in ep.trajectories:
            for t, (z, a) in enumerate(traj.pairs):
                index[traj.ue].setdefault(z, []).append((rank, t, action_index(a)))
    return index


def select_top_l(episodes, scenario: Scenario, L) -> TeacherKnowledge:
    """Greedy lowest-score selection without replacement.

    Scores use the unrefined trajectories; the kept trajectories are the
    refined ones.
    """
    ok = [n for n, ep in enumerate(episodes) if ep.finished]
    if len(ok) < L:
        raise SelectionError(f"need {L} finished episodes, have {len(ok)} (short by {L - len(ok)})")
    scores = {n: episode_score(episodes[n], scenario) for n in ok}
    remaining = list(ok)
    picked = []
    for _ in range(L):
        n = min(remaining, key=lambda k: (scores[k], k))
        picked.append(n)
        remaining.remove(n)
    refined = [TeacherEpisode([refine(t) for t in episodes[n].trajectories]) for n in picked]
    return TeacherKnowledge(refined, picked, [scores[n] for n in picked],
                            [episode_score(ep, scenario) for ep in refined], scenario.n_agents)


# ------------------------------------------------------------------ planner teacher

_WAIT = len(ACTIONS)  # pseudo action index: hold position


def _absorbing_action(world, cell, blocked_cells=()):
    for i, (dx, dy) in enumerate(ACTIONS):
        c = (cell[0] + int(dx) * world.v, cell[1] + int(dy) * world.v)
        if not world.free(c) or c in blocked_cells:
            return i
    return None


def _shift(arr, dx, dy, fill):
    """out[x, y] = arr[x + dx, y + dy] (``fill`` outside)."""
    W, H = arr.shape
    out = np.full_like(arr, fill)
    out[max(0, -dx):min(W, W - dx), max(0, -dy):min(H, H - dy)] = \
        arr[max(0, dx):min(W, W + dx), max(0, dy):min(H, H + dy)]
    return out


def _plan_one(scenario: Scenario, j, occupied, claimed, temperature, rng):
    """Cell sequence for UE ``j``.

    ``occupied[t]`` marks cells UE ``j`` may not be in at time ``t``;
    ``claimed[t]`` marks cells earlier UEs hold at time ``t`` (used to decide
    whether a hold can be realized by an absorbed move).
    """
    world = scenario.world
    W, H, T = world.width, world.height, scenario.t_max
    start, dest = scenario.starts[j], scenario.dests[j]
    with np.errstate(divide="ignore"):
        move_cost = np.where(world.buildings, np.inf, 1.0 + scenario.budget.p_r / world.channel.gains)
    moves = [tuple(int(c) * world.v for c in a) for a in ACTIONS]
    static_absorb = np.zeros((W, H), dtype=bool)
    for dx, dy in moves:
        static_absorb |= ~_shift(~world.buildings, dx, dy, False)
    can_wait = np.empty((T, W, H), dtype=bool)
    for t in range(T):
        cw = static_absorb.copy()
        if claimed[t + 1].any():
            for dx, dy in moves:
                cw |= _shift(claimed[t + 1], dx, dy, False)
        can_wait[t] = cw
    V = np.full((T + 1, W, H), np.inf)
    V[T][dest] = 0.0
    for t in range(T - 1, -1, -1):
        nxt = np.where(occupied[t + 1], np.inf, move_cost + V[t + 1])
        best = np.where(can_wait[t], nxt, np.inf)
        for dx, dy in moves:
            best = np.minimum(best, _shift(nxt, dx, dy, np.inf))
        best[dest] = 0.0
        V[t] = best
    if not np.isfinite(V[0][start]):
        raise PlannerFailure(f"UE {j}: no path from {start} to {dest} within {T} steps")
    path = [start]
    cur = start
    for t in range(T):
        if cur == dest:
            break
        options = []
        for m, (dx, dy) in enumerate(moves + [(0, 0)]):
            c = (cur[0] + dx, cur[1] + dy)
            if not world.inside(c) or occupied[t + 1][c]:
                continue
            if m == _WAIT and not can_wait[t][cur]:
                continue
            val = move_cost[c] + V[t + 1][c]
            if np.isfinite(val):
                options.append((val, m, c))
        best = min(v for v, _, _ in options)
        if temperature > 0:
            pool = [o for o in options if o[0] <= (1 + temperature) * best]
            choice = pool[rng.integers(len(pool))]
        else:
            choice = min(options, key=lambda o: (o[0], o[1]))
        cur = choice[2]
        path.append(cur)
    return path


def planner_teacher_episode(scenario: Scenario, temperature=0.0, seed=0) -> TeacherEpisode:
    """Prioritized planning in ascending UE order.

    Each UE minimizes the sum over moves of ``1 + P_r/|h|^2`` at the cell
    entered, avoiding the space-time cells of earlier UEs (and the cells
    they are about to enter).  With ``temperature > 0`` each step is drawn
    uniformly among moves whose cost-to-go is within a factor
    ``1 + temperature`` of the best.
    """
    rng = np.random.default_rng(seed)
    W, H, T = scenario.world.width, scenario.world.height, scenario.t_max
    occupied = np.zeros((T + 2, W, H), dtype=bool)
    claimed = np.zeros((T + 2, W, H), dtype=bool)
    paths = []
    for j in range(scenario.n_agents):
        path = _plan_one(scenario, j, occupied, claimed, temperature, rng)
        paths.append(path)
        for t, c in enumerate(path):
            if t >= 1:
                occupied[t][c] = claimed[t][c] = True
                if c != path[t - 1]:
                    # a later UE must not sit where this one is about to move
                    occupied[t - 1][c] = True
    return _replay(scenario, paths)


def _replay(scenario: Scenario, paths) -> TeacherEpisode:
    """Execute planned cell sequences in the environment and record the
    effective moves; holds are realized with an action the env absorbs."""
    world = scenario.world
    agents = reset(world, scenario.starts, scenario.dests)
    pairs = [[] for _ in agents]
    T = max(len(p) for p in paths) - 1
    for t in range(T):
        acts = []
        for j, a in enumerate(agents):
            if a.done or t + 1 >= len(paths[j]):
                acts.append(0)
                continue
            nxt = paths[j][t + 1]
            d = (nxt[0] - a.pos[0], nxt[1] - a.pos[1])
            if d == (0, 0):
                claimed = {agents[i].pos for i in range(j + 1, len(agents)) if not agents[i].done}
                claimed |= {paths[i][min(t + 1, len(paths[i]) - 1)] for i in range(j)
                            if not agents[i].done}
                acts.append(_absorbing_action(world, a.pos, claimed))
            else:
                acts.append(action_index(d, world.v))
        new = step(world, agents, acts)
        for j, (a_new, valid) in enumerate(new):
            if agents[j].done:
                continue
            old = agents[j].pos
            pairs[j].append((old, (a_new.pos[0] - old[0], a_new.pos[1] - old[1])))
            if a_new.pos != paths[j][t + 1]:
                raise PlannerFailure(f"UE {j}: replay diverged from plan at step {t}")
        agents = [a for a, _ in new]
    return TeacherEpisode([Trajectory(j, pairs[j], agents[j].pos) for j in range(len(agents))],
                          finished=all(a.done for a in agents))


def generate_planner_episodes(scenario: Scenario, n, temperature=0.2, seed=0):
    rng = np.random.default_rng(seed)
    seeds = rng.integers(0, 2**31, n)
    return [planner_teacher_episode(scenario, temperature, int(s)) for s in seeds]


# ------------------------------------------------------------------ text interface

_DIR_OF_OFFSET = {tuple(a): w for a, w in zip(ACTIONS, ACTION_WORDS)}
_WORD_RE = re.compile(r"\b(northwest|northeast|southwest|southeast|north|south|east|west)\b",
                      re.IGNORECASE)
WORD_TO_ACTION = {w: i for i, w in enumerate(ACTION_WORDS)}


def _listing(words):
    return ", ".join(words) if words else "none"


def render_ul_text(obs, pos, dest, ue=0):
    """Plain-text report of one UE's 3x3 view and its remaining route."""
    buildings, edges, ues, weak = [], [], [], []
    for dx, dy in PATCH_OFFSETS:
        if dx == 0 and dy == 0:
            continue
        word = _DIR_OF_OFFSET[(dx, dy)]
        code = obs.local_loc[dx + 1, dy + 1]
        if code == BUILDING:
            buildings.append(word)
        elif code == OUTSIDE:
            edges.append(word)
        elif code == OTHER_UE:
            ues.append(word)
        if obs.local_chan[dx + 1, dy + 1]:
            weak.append(word)
    dx, dy = dest[0] - pos[0], dest[1] - pos[1]
    route = (f"{abs(dx)} {'east' if dx >= 0 else 'west'}, {abs(dy)} {'north' if dy >= 0 else 'south'}, "
             f"distance {abs(dx) + abs(dy)}")
    here = " Current cell is weak." if obs.local_chan[1, 1] else ""
    return (f"UE{ue + 1}: buildings {_listing(buildings)}; edges {_listing(edges)}; "
            f"UEs {_listing(ues)}; weak channel {_listing(weak)}.{here} Destination {route}.")


def parse_action(dl_text, ue):
    """Action index named for UE ``ue`` (0-based; addressed as ``UE{ue+1}:``)
    in a downlink text, or None.

    The UE's own segment is searched first, then an ``all UEs:`` segment; the
    first direction word found wins.
    """
    if isinstance(dl_text, bytes):
        dl_text = dl_text.decode("latin-1")
    seg = _segment(dl_text, rf"\bUE{ue + 1}:")
    if seg is None:
        seg = _segment(dl_text, r"\ball UEs:")
    if seg is None:
        return None
    m = _WORD_RE.search(seg)
    return WORD_TO_ACTION[m.group(1).lower()] if m else None


def _segment(text, marker):
    m = re.search(marker, text, re.IGNORECASE)
    if not m:
        return None
    rest = text[m.end():]
    nxt = re.search(r"\bUE\d+:|\ball UEs:", rest, re.IGNORECASE)
    return rest[:nxt.start()] if nxt else rest


DEFAULT_META = (
    "You are a base station guiding user equipments (UEs) on a grid to their destinations. "
    "Each UE reports nearby buildings, grid edges, other UEs and cells with weak uplink "
    "channel, plus the remaining distance to its destination. Reach every destination in as "
    "few steps as possible while avoiding weak-channel cells. Explain your reasoning in one "
    "line, then give one line per UE in the form 'UEk: <direction>' using one of: "
    + ", ".join(ACTION_WORDS) + "."
)


@dataclass
class PromptBundle:
    meta: str
    shots: list = field(default_factory=list)    # (input, output) text pairs
    history: list = field(default_factory=list)  # (uplinks text, downlink text) per step
    uplinks: list = field(default_factory=list)  # current received UL texts

    @property
    def k(self):
        return len(self.shots)


def serialize_prompt(bundle: PromptBundle) -> str:
    parts = [bundle.meta, ""]
    if bundle.shots:
        parts.append("### Examples")
        for i, (inp, out) in enumerate(bundle.shots, 1):
            parts += [f"Example {i} input:", inp, f"Example {i} output:", out]
        parts.append("")
    if bundle.history:
        parts.append("### History")
        for t, (ul, dl) in enumerate(bundle.history, 1):
            parts += [f"Step {t} uplink:", ul, f"Step {t} downlink:", dl]
        parts.append("")
    parts.append("### Current uplink")
    parts += list(bundle.uplinks)
    parts += ["", "### Downlink"]
    return "\n".join(parts) + "\n"


class HttpCompletionClient:
    """POST {"prompt", "max_tokens"} -> {"text"} against ``url``."""

    def __init__(self, url, max_tokens=256, timeout=60.0):
        self.url, self.max_tokens, self.timeout = url, max_tokens, timeout

    def complete(self, prompt):
        body = json.dumps({"prompt": prompt, "max_tokens": self.max_tokens}).encode()
        req = urllib.request.Request(self.url, data=body,
                                     headers={"Content-Type": "application/json"})
        try:
            with urllib.request.urlopen(req, timeout=self.timeout) as resp:
                return json.loads(resp.read().decode())["text"]
        except (urllib.error.URLError, TimeoutError, OSError, KeyError, ValueError) as e:
            raise TeacherUnavailable(f"completion endpoint {self.url}: {e}") from e


def llm_teacher_step(bundle: PromptBundle, client, n_agents):
    """Query the controller once; returns (downlink text, per-UE action or
    None) and appends this exchange to the bundle history."""
    prompt = serialize_prompt(bundle)
    text = client.complete(prompt)
    actions = [parse_action(text, j) for j in range(n_agents)]
    bundle.history.append(("\n".join(bundle.uplinks), text))
    return text, actions


_UL_RE = re.compile(
    r"UE(\d+): buildings ([a-z, ]+); edges ([a-z, ]+); UEs ([a-z, ]+); weak channel ([a-z, ]+)\."
    r"( Current cell is weak\.)? Destination (\d+) (east|west), (\d+) (north|south), distance (\d+)\.")


class ScriptedController:
    """Deterministic stand-in for the language model.

    Reads the ``### Current uplink`` section; a UE whose report parses
    exactly gets a sensible greedy direction, a corrupted one gets a random
    direction.
    """

    def __init__(self, seed=0, n_agents=2):
        self.rng = np.random.default_rng(seed)
        self.n_agents = n_agents
        self.prompts = []

    def complete(self, prompt):
        self.prompts.append(prompt)
        section = prompt.split("### Current uplink\n", 1)[-1].split("\n### Downlink", 1)[0]
        reports = {}
        for line in section.splitlines():
            m = _UL_RE.fullmatch(line.strip())
            if m:
                reports[int(m.group(1))] = m
        lines = ["Reasoning: move each UE toward its destination around blocked and weak cells."]
        for k in range(1, self.n_agents + 1):
            word = self._decide(reports[k]) if k in reports else None
            if word is None:
                word = ACTION_WORDS[self.rng.integers(N_ACTIONS)]
            lines.append(f"UE{k}: {word}")
        return "\n".join(lines)

    @staticmethod
    def _decide(m):
        blocked = set()
        for g in (2, 3, 4):
            blocked |= {w.strip() for w in m.group(g).split(",")} - {"none"}
        weak = {w.strip() for w in m.group(5).split(",")} - {"none"}
        dx = int(m.group(7)) * (1 if m.group(8) == "east" else -1)
        dy = int(m.group(9)) * (1 if m.group(10) == "north" else -1)
        if dx == 0 and dy == 0:
            return None
        goal = np.array([dx, dy], dtype=float)
        best, best_key = None, None
        for a, w in zip(ACTIONS, ACTION_WORDS):
            if w in blocked:
                continue
            remaining = np.abs(goal - a).max()
            key = (remaining, w in weak, -float(a @ goal))
            if best_key is None or key < best_key:
                best, best_key = w, key
        return best


@dataclass
class LlmEpisodeResult:
    episode: TeacherEpisode
    travel_times: list
    fallbacks: int


def llm_teacher_episode(scenario: Scenario, client, snr_db, shots=(), meta=DEFAULT_META, seed=0):
    """One episode driven by a text controller over the 16QAM uplink.

    Unparseable replies repeat the UE's previous action; on the first step an
    action the environment will absorb is used instead.
    """
    rng = np.random.default_rng(seed)
    world = scenario.world
    agents = reset(world, scenario.starts, scenario.dests)
    bundle = PromptBundle(meta, list(shots))
    J = scenario.n_agents
    pairs = [[] for _ in range(J)]
    prev = [None] * J
    fallbacks = 0
    for _ in range(scenario.t_max):
        if all(a.done for a in agents):
            break
        ul = []
        for j, a in enumerate(agents):
            if a.done:
                ul.append(f"UE{j + 1}: arrived.")
                continue
            text = render_ul_text(observe(world, agents, j, scenario.eta), a.pos, a.dest, j)
            ul.append(transmit_text(text, snr_db, rng))
        bundle.uplinks = ul
        _, acts = llm_teacher_step(bundle, client, J)
        chosen = []
        for j, a in enumerate(agents):
            act = acts[j]
            if act is None and not a.done:
                fallbacks += 1
                act = prev[j] if prev[j] is not None else _absorbing_action(
                    world, a.pos, {b.pos for b in agents if b is not a and not b.done})
                if act is None:
                    act = 0
                log.info("UE %d: no direction in reply, fallback action %s", j, ACTION_WORDS[act])
            chosen.append(act if act is not None else 0)
        new = step(world, agents, chosen)
        for j, (a_new, _) in enumerate(new):
            if agents[j].done:
                continue
            old = agents[j].pos
            pairs[j].append((old, (a_new.pos[0] - old[0], a_new.pos[1] - old[1])))
            prev[j] = chosen[j]
        agents = [a for a, _ in new]
    ep = TeacherEpisode([Trajectory(j, pairs[j], agents[j].pos) for j in range(J)],
                        finished=all(a.done for a in agents))
    times = [a.steps if a.done else scenario.t_max for a in agents]
    return LlmEpisodeResult(ep, times, fallbacks)
