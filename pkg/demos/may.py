"""May's grazing model with alpha = 0.1: two fold values of the grazing rate beta."""

import numpy as np

from _shared import arguments, run
from einn.models import zoo_entry

args = arguments(__doc__)
run(zoo_entry("may"), args, np.linspace(0.0, 0.6, 301))
