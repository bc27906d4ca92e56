"""A model document with no closed-form inverse: spruce budworm with the growth rate r as parameter.

The oracle derives r(u) = u / ((1 + u^2)(1 - u/q)) by back-substitution, so the
same pipeline runs on a user model without any extra code.
"""

import numpy as np

from _shared import arguments, run
from einn import oracle
from einn.models import load_entry

DOCUMENT = """
[model]
schema_version = 1
id = budworm
state_vars = u
bifurcation_param = r
candidate_coordinate = u
candidate_window = 0.3, 8.0
oracle_window = 0.01, 9.99
lambda_window = 0.3, 0.7
feasibility = r >= 0; u >= 0

[parameters]
q = 10.0

[equations]
u = "r*u*(1 - u/q) - u^2/(1 + u^2)"
"""

args = arguments(__doc__)
entry = load_entry(DOCUMENT)
for u in (1.0, 2.0, 5.0):
    by_hand = u / ((1 + u * u) * (1 - u / 10.0))
    print(f"derived r({u}) = {oracle.closed_form_inverse(entry, u):.12f}, by hand {by_hand:.12f}")
# u = 0 and u = q bound the biologically relevant states; the oracle window sits just inside
run(entry, args, np.linspace(0.3, 0.7, 201))
