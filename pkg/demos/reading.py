"""Eye-movement stand-in: word length and suffix length with crossed random effects.

Fixation durations carry random intercepts for word, sentence and subject.
The script writes the corpus to a CSV and runs the command-line pipeline on
it, which is the route a user with their own data would take.  Expect a
run time of about half a minute.

    python3 demos/reading.py [outdir]
"""

import sys
from pathlib import Path

from ambigam.cli import main
from ambigam.data import write_csv
from ambigam.simulate import generate_reading

out = Path(sys.argv[1] if len(sys.argv) > 1 else "reading_demo")
out.mkdir(exist_ok=True)
write_csv(generate_reading(42), out / "reading.csv")

sys.exit(main(["ambiguity", "--input", str(out / "reading.csv"), "--response", "x_l",
               "--smooth", "a,l_w,l_s", "--random", "Word,Sentence,Subject",
               "--interaction", "l_w:l_s", "--out", str(out / "report.json")]))
