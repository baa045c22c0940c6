"""Split a report into sections and build the prompts sent to the model."""

# %%
from reportlabel import BUILTIN_CONDITIONS, Report
from reportlabel.corpus import SectionKind, prepare_report_text
from reportlabel.prompting import build_direct_query, build_summary_request

text = ("CLINICAL HISTORY: Known prostate carcinoma. ?metastasis\n"
        "FINDINGS: Low T1 signal in the T9 vertebral body.\n"
        "CONCLUSION: Appearances in keeping with a metastatic deposit at T9.")
report = Report.from_text("demo-1", text)

# Offsets are UTF-8 byte positions into the raw text.
for span in report.sections:
    print(f"{span.kind.value:8s} [{span.start:3d}, {span.end:3d})  {report.span_content(span)!r}")

# %%
# The cancer definition asks for the clinical history to be hidden from the
# model, since it often states the suspicion being investigated.
cancer = BUILTIN_CONDITIONS["cancer"]
print(prepare_report_text(report, cancer))
print([s.kind for s in report.sections_of(SectionKind.SUMMARY)])

# %%
for bundle in (build_summary_request(cancer, prepare_report_text(report, cancer)),
               build_direct_query(cancer, prepare_report_text(report, cancer))):
    print(f"--- {bundle.strategy.value}")
    for m in bundle.messages():
        print(f"{m['role']}: {m['content']}")
