"""Fold thresholds of the Scheffer model du/dt = alpha - beta*u + r*u^p/(u^p + h^p)."""

import numpy as np

from _shared import arguments, run
from einn.models import zoo_entry

args = arguments(__doc__)
run(zoo_entry("scheffer"), args, np.linspace(0.0, 3.5, 351))
