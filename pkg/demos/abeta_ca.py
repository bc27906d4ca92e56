"""Two-variable amyloid-beta / calcium model; the network predicts a2 and the companion v together."""

import numpy as np

from _shared import arguments, run
from einn.models import zoo_entry

args = arguments(__doc__)
m = run(zoo_entry("abeta_ca"), args, np.linspace(0.0, 4.0, 201))
u = np.array([1.0, 1.83, 2.5])
for ui, (a2, v) in zip(u, m.outputs(u)):
    print(f"  u* = {ui:.2f}: a2 = {a2:.4f}, v = {v:.4f}")
