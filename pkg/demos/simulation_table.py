"""Run the seven simulation scenarios and print the summary table.

Rows alternate between data with and without a true x:z effect and between
linear-model and two-step analyses.  A hundred iterations take well under
a minute; set AMBIG_THREADS to spread them across cores.

    python3 demos/simulation_table.py [iterations] [seed]
"""

import sys

from ambigam.simulate import run_table3, table3_markdown

iterations = int(sys.argv[1]) if len(sys.argv) > 1 else 100
seed = int(sys.argv[2]) if len(sys.argv) > 2 else 42

print(table3_markdown(run_table3(iterations, seed)))
