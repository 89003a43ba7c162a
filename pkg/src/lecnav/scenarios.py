"""Ready-made maps: a 10x10 desk map with a weak-channel corridor and a
synthetic stand-in for the 20x20 evaluation layout."""
import numpy as np

from .channel import LinkBudget, synth_map
from .env import GridWorld, Scenario


def _mask(width, height, cells):
    m = np.zeros((width, height), dtype=bool)
    for x, y in cells:
        m[x, y] = True
    return m


def desk_scenario(snr_db=10.0) -> Scenario:
    """BS on the east edge, a 2x2 building in the middle.  The building
    shadows a weak corridor across the west half, straddling the diagonal
    routes of two crossing UEs."""
    W = H = 10
    buildings = _mask(W, H, [(4, 4), (4, 5), (5, 4), (5, 5)])
    bs = (9, 5)
    world = GridWorld(W, H, buildings, bs, synth_map(W, H, bs, buildings))
    # eta = 1e-11; a 2 W budget makes a weak cell cost at least 2 W of
    # inverted transmit power, so power-aware teachers detour around them
    p_r = 2e-11
    budget = LinkBudget.from_snr_db(snr_db, p_th=p_r / 1e-11, p_r=p_r)
    return Scenario(world, [(0, 0), (0, 9)], [(9, 9), (9, 0)], budget)


def grid20_scenario(snr_db=10.0, seed=0) -> Scenario:
    """20x20 grid, BS at (6, 10), UE1 (0,0)->(9,9), UE2 (0,9)->(10,0), weak
    threshold sqrt(eta) = 3e-7.  Buildings and gains are synthetic."""
    W = H = 20
    blocks = [(3, 12, 3, 3), (9, 4, 2, 3), (13, 13, 3, 2), (14, 5, 2, 4), (5, 5, 2, 2)]
    cells = [(x + i, y + k) for x, y, w, h in blocks for i in range(w) for k in range(h)]
    buildings = _mask(W, H, cells)
    bs = (6, 10)
    chan = synth_map(W, H, bs, buildings, shadowing_std_db=4.0, seed=seed, k0=1e-9)
    world = GridWorld(W, H, buildings, bs, chan)
    eta = (3e-7) ** 2
    budget = LinkBudget.from_snr_db(snr_db, p_th=1.0, p_r=eta)
    return Scenario(world, [(0, 0), (0, 9)], [(9, 9), (10, 0)], budget)


def render(scenario: Scenario) -> str:
    """ASCII picture, north up: # building, B base station, w weak, S/D
    UE starts and destinations (numbered)."""
    w = scenario.world
    weak = scenario.weak_mask()
    marks = {}
    for j, (s, d) in enumerate(zip(scenario.starts, scenario.dests)):
        marks[s] = f"{j + 1}"
        marks[d] = chr(ord("a") + j)
    lines = []
    for y in range(w.height - 1, -1, -1):
        row = []
        for x in range(w.width):
            if (x, y) in marks:
                row.append(marks[(x, y)])
            elif w.buildings[x, y]:
                row.append("#")
            elif (x, y) == w.bs:
                row.append("B")
            else:
                row.append("w" if weak[x, y] else ".")
        lines.append("".join(row))
    return "\n".join(lines)
