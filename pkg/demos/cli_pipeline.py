"""End to end through the command line: write a small corpus, run ``cfir pipeline``.

Run with ``python demos/cli_pipeline.py``; outputs land in ``demos/out``.
"""

import json
from pathlib import Path

from counterfactual_ir.cli import run
from counterfactual_ir.synthetic import planted_corpus

here = Path(__file__).parent
data = here / "data"

# Inputs: documents and queries as JSONL ({"id", "text"}), triples as TSV
# (query id, document id, text of the relevant passage).
pc = planted_corpus(num_docs=30, seed=7)
pc.write(data)

# Paths in the config are relative to the config file.
(data / "run.toml").write_text("""
[corpus]
documents = "documents.jsonl"
queries = "queries.jsonl"
triples = "triples.tsv"

[segment]
window_size = 16
overlap_ratio = 0.5

[attribution]
method = "shapley"
resolution = "merge"
num_permutations = 2000
""")

out = here / "out"
code = run(["pipeline", "--config", str(data / "run.toml"), "--out", str(out), "--jobs", "2"])
print("exit code", code)
for name in sorted(p.name for p in out.iterdir()):
    print("  ", name)
print((out / "report.tsv").read_text())
print(json.dumps(json.loads((out / "stats.json").read_text()), indent=1))
