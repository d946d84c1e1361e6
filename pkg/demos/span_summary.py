"""Mean predicted span per (layer, token) from an ``analyze`` CSV."""

import csv
import sys
from collections import defaultdict

NAMES = {0: "A", 1: "B", 2: "GO", 3: "SLOT", 4: "END"}

acc = defaultdict(list)
with open(sys.argv[1]) as fh:
    for row in csv.DictReader(fh):
        acc[int(row["layer"]), int(row["token"])].append(float(row["e_i"]))
for (layer, tok), es in sorted(acc.items()):
    print(f"layer {layer} {NAMES.get(tok, tok):>4}: n={len(es):4d} mean e_i={sum(es) / len(es):8.2f} max={max(es):8.2f}")
