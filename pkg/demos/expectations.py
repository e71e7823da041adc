"""Educational expectations: a sign flip under quadratic mains.

The stand-in data mimic a survey in which a child's expectation (EE)
depends concavely on each parent's education (ME, FE), and the two parents'
levels are correlated.  The ME:FE product is significant with linear mains,
shrinks once squared mains enter, and the two-step test calls it Ambiguous.

    python3 demos/expectations.py [seed]
"""

import sys

from ambigam import AmSpec, DesignSpec, center, compare_models, product
from ambigam.ols import Power
from ambigam.simulate import generate_expectations

seed = int(sys.argv[1]) if len(sys.argv) > 1 else 1
ds = center(generate_expectations(seed), ["ME", "FE"])
me_fe = product("ME", "FE")

for label, terms in [
    ("linear mains", (Power("ME"), Power("FE"), me_fe)),
    ("quadratic mains", (Power("ME"), Power("ME", 2), Power("FE"), Power("FE", 2), me_fe)),
]:
    table = compare_models(ds, DesignSpec(terms), AmSpec("EE", ["ME", "FE"]), [me_fe])
    print(f"## {label}\n")
    print(table.to_markdown())
    print()
