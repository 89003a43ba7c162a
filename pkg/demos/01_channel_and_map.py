# %% [markdown]
# # Channel map and the 16QAM uplink
#
# The desk map is a 10x10 grid with a 2x2 building block and the base
# station on the east edge.  Cells whose channel gain falls below
# eta = P_r / P_th would need more than the transmit budget under channel
# inversion; those are the "weak" cells the UEs should avoid.

# %%
import numpy as np

from lecnav import channel as ch
from lecnav.scenarios import desk_scenario, render

sc = desk_scenario()
print(render(sc))
print(f"eta = {sc.eta:.3g}, weak cells: {sc.weak_mask().sum()} of {sc.weak_mask().size}")

# %% [markdown]
# Channel inversion: the UE transmits P_r / |h|^2 so the BS always receives
# P_r.  The received SNR therefore does not depend on where the UE stands.

# %%
gains = sc.world.channel.gains.ravel()
snrs = [ch.received_snr(g, sc.budget) for g in gains]
print("received SNR over all cells (dB):", np.round(10 * np.log10([min(snrs), max(snrs)]), 6))

# %% [markdown]
# Symbol error rate of 16QAM against the closed-form value.

# %%
rng = np.random.default_rng(0)
for snr in (10, 14, 18):
    nib = rng.integers(0, 16, 200_000)
    ser = np.mean(ch.qam16_demodulate(ch.awgn(ch.qam16_modulate(nib), snr, rng)) != nib)
    print(f"{snr:2d} dB  simulated {ser:.4f}  exact {ch.qam16_ser(snr):.4f}  "
          f"approx {ch.qam16_ser_approx(snr):.4f}")

# %% [markdown]
# Text sent over the same link picks up character errors as SNR drops,
# which is what breaks the language-based controller at low SNR.

# %%
msg = "UE1: buildings east; edges none. Destination 3 east, 2 north, distance 3."
for snr in (25, 20, 15, 10):
    print(f"{snr:2d} dB  {ch.transmit_text(msg, snr, rng=1)!r}")
