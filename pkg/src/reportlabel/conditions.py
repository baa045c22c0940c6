"""Condition definitions used to drive label extraction.

A condition is a named finding plus a prose definition that is handed to the
language model. Conditions are either labelled once per scan or once per
intervertebral disc (IVD) level.
"""

from __future__ import annotations

import enum
import json
from dataclasses import dataclass, field
from pathlib import Path
from typing import Any

import yaml


class Granularity(str, enum.Enum):
    SCAN = "scan"
    IVD = "ivd"


#: The lower three lumbar discs; higher-level stenosis is rare.
LOWER_LUMBAR_LEVELS = ("L3-L4", "L4-L5", "L5-S1")

#: The 18 discs from C7 down to the sacrum, top to bottom.
SPINE_LEVELS = (
    "C7-T1",
    *(f"T{i}-T{i + 1}" for i in range(1, 12)),
    "T12-L1",
    "L1-L2",
    "L2-L3",
    "L3-L4",
    "L4-L5",
    "L5-S1",
)


class ConditionError(ValueError):
    pass


@dataclass(frozen=True)
class ConditionSpec:
    """A condition to label.

    ``levels`` must be given for IVD-level conditions and omitted otherwise.
    ``exclude_clinical_history`` strips history sections before prompting,
    which matters when the history itself mentions the condition (for example
    a ``?cancer`` query).
    """

    name: str
    definition: str
    granularity: Granularity = Granularity.SCAN
    exclude_clinical_history: bool = False
    levels: tuple[str, ...] | None = None
    metadata: dict[str, Any] = field(default_factory=dict, compare=False)

    def __post_init__(self):
        problems = []
        if not self.name or not self.name.strip():
            problems.append("condition name is empty")
        if not self.definition or not self.definition.strip():
            problems.append(f"condition {self.name!r} has an empty definition")
        gran = Granularity(self.granularity)
        object.__setattr__(self, "granularity", gran)
        if self.levels is not None:
            object.__setattr__(self, "levels", tuple(self.levels))
        if gran is Granularity.IVD and not self.levels:
            problems.append(f"condition {self.name!r} is IVD-level but lists no levels")
        if gran is Granularity.SCAN and self.levels:
            problems.append(f"condition {self.name!r} is scan-level but lists levels")
        if problems:
            raise ConditionError("; ".join(problems))

    @property
    def is_ivd_level(self) -> bool:
        return self.granularity is Granularity.IVD

    def to_dict(self) -> dict[str, Any]:
        return {
            "name": self.name,
            "definition": self.definition,
            "granularity": self.granularity.value,
            "exclude_clinical_history": self.exclude_clinical_history,
            "levels": list(self.levels) if self.levels else None,
        }

    @classmethod
    def from_dict(cls, data: dict[str, Any]) -> "ConditionSpec":
        known = {"name", "definition", "granularity", "exclude_clinical_history", "levels"}
        return cls(
            name=data.get("name", ""),
            definition=data.get("definition", ""),
            granularity=data.get("granularity", Granularity.SCAN),
            exclude_clinical_history=bool(data.get("exclude_clinical_history", False)),
            levels=data.get("levels"),
            metadata={k: v for k, v in data.items() if k not in known},
        )


CANCER = ConditionSpec(
    name="cancer",
    definition=(
        "Spinal cancer includes malignant lesions that originate from the spine or "
        "spinal cord and metastatic or secondary tumours that have spread from another "
        "site to the spine."
    ),
    exclude_clinical_history=True,
)

STENOSIS = ConditionSpec(
    name="stenosis",
    definition=(
        "Stenosis is any narrowing or compression of the spinal canal or nerves, "
        "including disc protrusions, impingement of nerve roots, or compromise of recesses."
    ),
)

STENOSIS_IVD = ConditionSpec(
    name="stenosis",
    definition=STENOSIS.definition,
    granularity=Granularity.IVD,
    levels=LOWER_LUMBAR_LEVELS,
)

SPONDYLOLISTHESIS = ConditionSpec(
    name="spondylolisthesis",
    definition=(
        "Spondylolisthesis is a condition in which a vertebra slips out of place onto "
        "the bone below it."
    ),
)

CAUDA_EQUINA = ConditionSpec(
    name="cauda equina compression",
    definition=(
        "Cauda equina compression is the compression of a collection of nerve roots "
        "called the cauda equina, distinct from cauda equina syndrome; if the patient "
        "has cauda equina compression, the report will explicitly state its presence."
    ),
)

HERNIATION = ConditionSpec(
    name="herniation",
    definition=(
        "Herniation is a condition in which a disc in the spine ruptures, and the disc "
        "nucleus is displaced from intervertebral space; it is more severe condition "
        "than disc protrusion or bulging, and if the patient has herniation, the report "
        "will explicitly state its presence."
    ),
)

BUILTIN_CONDITIONS = {
    c.name: c for c in (CANCER, STENOSIS, SPONDYLOLISTHESIS, CAUDA_EQUINA, HERNIATION)
}
# same condition and prompt wording, asked once per lower lumbar disc
BUILTIN_CONDITIONS["stenosis-ivd"] = STENOSIS_IVD


def read_structured(path: str | Path) -> Any:
    """Read a JSON or YAML file, picked by suffix."""
    path = Path(path)
    text = path.read_text(encoding="utf-8")
    if path.suffix.lower() in (".yaml", ".yml"):
        return yaml.safe_load(text)
    return json.loads(text)


def load_conditions(path: str | Path) -> dict[str, ConditionSpec]:
    """Load conditions from a file holding a list (or ``{"conditions": [...]}``)."""
    data = read_structured(path)
    if isinstance(data, dict):
        data = data.get("conditions", [])
    specs = [ConditionSpec.from_dict(d) for d in data]
    out: dict[str, ConditionSpec] = {}
    for spec in specs:
        if spec.name in out:
            raise ConditionError(f"duplicate condition {spec.name!r} in {path}")
        out[spec.name] = spec
    return out
