"""Label a synthetic corpus against the deterministic mock server."""

# %%
import tempfile
from pathlib import Path

from reportlabel import BUILTIN_CONDITIONS, ClientConfig, label_corpus, load_corpus
from reportlabel.mock_server import serve
from reportlabel.synthetic import gen_synthetic, read_truth, rule_table_for

out = Path(tempfile.mkdtemp())
paths = gen_synthetic(out, n_reports=40, positive_rate=0.4, seed=1)
reports = load_corpus(paths["corpus"])
truth = read_truth(paths["truth"])
print(f"{len(reports)} reports, {sum(truth.values())} positive, written to {out}")

# %%
# The rule table maps planted keywords to fixed yes/no logits, so p_yes is
# known in closed form: 1 / (1 + e^-4) for a hit, 1 / (1 + e^2) otherwise.
with serve(rule_table_for()) as server:
    cfg = ClientConfig(endpoint=server.url, max_in_flight=4)
    records = label_corpus(reports, BUILTIN_CONDITIONS["cancer"], "summary-query", cfg)

for r in records[:6]:
    print(f"{r.report_id}  truth={truth[r.report_id]}  p_yes={r.p_yes:.4f}  label={r.label}")
    print(f"    summary: {r.summary}")

# %%
wrong = sum(r.label != truth[r.report_id] for r in records)
print(f"{wrong} disagreements with the planted truth at threshold 0.5")
