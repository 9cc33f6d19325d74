"""Dental knowledge base: ontology loading, report validation and prompt text.

The ontology lives in a YAML file (``data/ontology.yaml`` by default) with
tooth-count policies per dentition stage, region and size tables keyed by FDI
code, the special numbering rules and the closed anomaly vocabulary. Every
structural invariant is checked at load time.
"""
from __future__ import annotations

import json
from dataclasses import dataclass, field
from importlib import resources
from pathlib import Path
from typing import Any

import yaml

STAGES = ("deciduous", "mixed", "permanent")
REGIONS = ("anterior", "premolar", "molar")
SIZES = ("large", "medium", "small")
ARCHES = ("upper", "lower")
RULE_IDS = (
    "conditional-inclusion",
    "numbering-continuity",
    "morphology-stage",
    "positional-annotation",
    "count-consistency",
    "fdi-validity",
    "stage-count-range",
)
PERMANENT_FDI = frozenset(10 * q + p for q in range(1, 5) for p in range(1, 9))
DECIDUOUS_FDI = frozenset(10 * q + p for q in range(5, 9) for p in range(1, 6))
ARCH_QUADRANTS = {"upper": (1, 2, 5, 6), "lower": (3, 4, 7, 8)}
_EXPECTED_REGION_SIZES = {"anterior": 12, "premolar": 8, "molar": 12}
_EXPECTED_SIZE_SIZES = {"large": 12, "medium": 16, "small": 4}
_ABSENCE_KINDS = ("missing", "extracted")

# Report fields in the order of the reasoning stages: counting, anatomical
# classification, size classification, dentition stage, clinical conditions.
REPORT_FIELDS = (
    "arch",
    "teeth_number",
    "fdi_present",
    "third_molar_evidence",
    "anatomical_counts",
    "size_counts",
    "dentition_stage",
    "anomalies",
    "special_conditions",
    "notes",
)

STAGE_INSTRUCTIONS = (
    ("Tooth counting", "Count the visible teeth of this arch, list their FDI codes and state whether "
     "third molars are visibly present."),
    ("Anatomical classification", "Split the counted teeth into anterior, premolar and molar regions."),
    ("Size classification", "Split the counted teeth into large, medium and small size classes."),
    ("Dentition stage", "Classify the arch as deciduous, mixed or permanent from tooth morphology."),
    ("Clinical conditions", "Document missing, extracted or supernumerary teeth, dentures, caries, "
     "crowding, malocclusion and any other finding."),
)


class OntologyInvalid(ValueError):
    pass


class UnknownCode(KeyError):
    pass


@dataclass(frozen=True)
class CountPolicy:
    stage: str
    total: tuple[int, int] | None
    per_arch: tuple[int, int] | None
    per_quadrant: tuple[int, int] | None
    variable: bool = False


@dataclass(frozen=True)
class DentalOntology:
    stage_policies: dict[str, CountPolicy]
    region_map: dict[int, str]
    size_map: dict[int, str]
    special_rules: tuple[str, ...]
    valid_fdi: frozenset[int] = PERMANENT_FDI
    deciduous_region_map: dict[int, str] = field(default_factory=dict)
    deciduous_size_map: dict[int, str] = field(default_factory=dict)
    anomaly_kinds: tuple[str, ...] = ()
    stage_descriptions: dict[str, str] = field(default_factory=dict)
    raw: dict = field(default_factory=dict, compare=False, repr=False)

    @property
    def all_codes(self) -> frozenset[int]:
        return self.valid_fdi | frozenset(self.deciduous_region_map)

    def codes_in_region(self, region: str) -> list[int]:
        return sorted(c for c, r in self.region_map.items() if r == region)

    def codes_in_size(self, size: str) -> list[int]:
        return sorted(c for c, s in self.size_map.items() if s == size)


def _range(value, what: str) -> tuple[int, int]:
    if not (isinstance(value, list) and len(value) == 2 and all(isinstance(v, int) for v in value)):
        raise OntologyInvalid(f"{what} must be a [min, max] integer pair")
    lo, hi = value
    if lo > hi:
        raise OntologyInvalid(f"{what}: min > max")
    return lo, hi


def _code_map(section: dict, key: str, what: str) -> dict[int, str]:
    out: dict[int, str] = {}
    for label, entry in section.items():
        codes = entry.get(key) if isinstance(entry, dict) else entry
        if not isinstance(codes, list):
            raise OntologyInvalid(f"{what}.{label} lacks a code list")
        for code in codes:
            if code in out:
                raise OntologyInvalid(f"{what}: code {code} listed under both {out[code]} and {label}")
            out[int(code)] = label
    return out


def _check_partition(mapping: dict[int, str], universe: frozenset[int], expected: dict[str, int], what: str):
    missing = sorted(universe - mapping.keys())
    if missing:
        raise OntologyInvalid(f"{what} is not total: missing codes {missing}")
    extra = sorted(mapping.keys() - universe)
    if extra:
        raise OntologyInvalid(f"{what} has codes outside the permanent set: {extra}")
    for label, n in expected.items():
        got = sum(1 for v in mapping.values() if v == label)
        if got != n:
            raise OntologyInvalid(f"{what}: class {label} has {got} codes, expected {n}")
    unknown = set(mapping.values()) - expected.keys()
    if unknown:
        raise OntologyInvalid(f"{what}: unknown classes {sorted(unknown)}")


def ontology_from_dict(data: dict) -> DentalOntology:
    """Build and validate an ontology from its parsed data-file contents."""
    if not isinstance(data, dict):
        raise OntologyInvalid("ontology document must be a mapping")
    try:
        counts = data["tooth_count"]
        regions = data["anatomical_classification"]
        sizes = data["size_classification"]
        rules = data["special_rules"]
    except KeyError as exc:
        raise OntologyInvalid(f"missing section {exc.args[0]!r}") from None

    policies: dict[str, CountPolicy] = {}
    for stage in STAGES:
        if stage not in counts:
            raise OntologyInvalid(f"no count policy for stage {stage!r}")
        entry = counts[stage]
        variable = bool(entry.get("variable", False))
        if variable:
            policies[stage] = CountPolicy(stage, None, _range(entry["per_arch"], f"{stage}.per_arch")
                                          if "per_arch" in entry else None, None, True)
        else:
            policies[stage] = CountPolicy(
                stage,
                _range(entry.get("total"), f"{stage}.total"),
                _range(entry.get("per_arch"), f"{stage}.per_arch"),
                _range(entry.get("per_quadrant"), f"{stage}.per_quadrant"),
            )
    if policies["deciduous"].total != (20, 20):
        raise OntologyInvalid("deciduous total must be exactly 20")
    lo, hi = policies["permanent"].total
    if not (28 <= lo <= hi <= 32):
        raise OntologyInvalid("permanent total must lie within [28, 32]")

    region_map = _code_map(regions, "fdi", "anatomical_classification")
    size_map = _code_map(sizes, "fdi", "size_classification")
    _check_partition(region_map, PERMANENT_FDI, _EXPECTED_REGION_SIZES, "region map")
    _check_partition(size_map, PERMANENT_FDI, _EXPECTED_SIZE_SIZES, "size map")

    if not (isinstance(rules, list) and len(rules) == 5 and all(isinstance(r, str) and r.strip() for r in rules)):
        raise OntologyInvalid("special_rules must be a list of 5 non-empty strings")

    dec = data.get("deciduous_classification", {})
    dec_region = _code_map(dec.get("region", {}), "fdi", "deciduous region")
    dec_size = _code_map(dec.get("size", {}), "fdi", "deciduous size")
    if dec_region or dec_size:
        for name, m, labels in (("deciduous region", dec_region, REGIONS), ("deciduous size", dec_size, SIZES)):
            if set(m) != DECIDUOUS_FDI:
                raise OntologyInvalid(f"{name} map must cover exactly the codes 51-55 ... 81-85")
            if set(m.values()) - set(labels):
                raise OntologyInvalid(f"{name} map uses unknown classes")

    kinds = tuple(data.get("anomaly_kinds", ()))
    if not kinds:
        raise OntologyInvalid("anomaly_kinds must be non-empty")
    return DentalOntology(
        stage_policies=policies,
        region_map=region_map,
        size_map=size_map,
        special_rules=tuple(" ".join(r.split()) for r in rules),
        deciduous_region_map=dec_region,
        deciduous_size_map=dec_size,
        anomaly_kinds=kinds,
        stage_descriptions=dict(data.get("dentition_stages", {})),
        raw=data,
    )


def default_ontology_path() -> Path:
    return Path(str(resources.files("archmap") / "data" / "ontology.yaml"))


def load_ontology(source: str | Path | None = None) -> DentalOntology:
    """Load an ontology file (the bundled one when ``source`` is None)."""
    path = Path(source) if source is not None else default_ontology_path()
    try:
        data = yaml.safe_load(path.read_text(encoding="utf-8"))
    except yaml.YAMLError as exc:
        raise OntologyInvalid(f"cannot parse {path}: {exc}") from exc
    return ontology_from_dict(data)


def save_ontology(ontology: DentalOntology, path: str | Path) -> None:
    Path(path).write_text(yaml.safe_dump(ontology.raw, sort_keys=False, allow_unicode=True), encoding="utf-8")


def region_of(fdi: int, ontology: DentalOntology | None = None) -> str:
    ontology = ontology or _default()
    table = {**ontology.region_map, **ontology.deciduous_region_map}
    try:
        return table[int(fdi)]
    except (KeyError, TypeError, ValueError):
        raise UnknownCode(fdi) from None


def size_of(fdi: int, ontology: DentalOntology | None = None) -> str:
    ontology = ontology or _default()
    table = {**ontology.size_map, **ontology.deciduous_size_map}
    try:
        return table[int(fdi)]
    except (KeyError, TypeError, ValueError):
        raise UnknownCode(fdi) from None


def expected_counts(stage: str, ontology: DentalOntology | None = None) -> CountPolicy:
    ontology = ontology or _default()
    try:
        return ontology.stage_policies[stage]
    except KeyError:
        raise ValueError(f"unknown dentition stage {stage!r}") from None


_DEFAULT: DentalOntology | None = None


def _default() -> DentalOntology:
    global _DEFAULT
    if _DEFAULT is None:
        _DEFAULT = load_ontology()
    return _DEFAULT


# ---------------------------------------------------------------- reports


@dataclass
class Anomaly:
    kind: str
    fdi: int | None = None
    position: str = ""
    note: str = ""

    def to_dict(self) -> dict:
        return {"kind": self.kind, "fdi": self.fdi, "position": self.position, "note": self.note}


@dataclass
class StructuredReport:
    """One arch's structured finding. Labels are stored as received so that
    out-of-vocabulary output stays representable and can be flagged."""

    arch: str
    teeth_number: int
    fdi_present: list[int] = field(default_factory=list)
    third_molar_evidence: bool = False
    anatomical_counts: dict[str, int] = field(default_factory=dict)
    size_counts: dict[str, int] = field(default_factory=dict)
    dentition_stage: str = "permanent"
    anomalies: list[Anomaly] = field(default_factory=list)
    special_conditions: list[str] = field(default_factory=list)
    notes: str = ""

    def to_dict(self) -> dict:
        return {
            "arch": self.arch,
            "teeth_number": self.teeth_number,
            "fdi_present": list(self.fdi_present),
            "third_molar_evidence": self.third_molar_evidence,
            "anatomical_counts": dict(self.anatomical_counts),
            "size_counts": dict(self.size_counts),
            "dentition_stage": self.dentition_stage,
            "anomalies": [a.to_dict() for a in self.anomalies],
            "special_conditions": list(self.special_conditions),
            "notes": self.notes,
        }

    @classmethod
    def from_dict(cls, d: dict) -> "StructuredReport":
        anomalies = []
        for a in d.get("anomalies", []):
            fdi = a.get("fdi")
            anomalies.append(Anomaly(
                kind=a.get("kind", ""),
                fdi=int(fdi) if fdi is not None else None,
                position=a.get("position", "") or "",
                note=a.get("note", "") or "",
            ))
        return cls(
            arch=d["arch"],
            teeth_number=int(d["teeth_number"]),
            fdi_present=[int(c) for c in d.get("fdi_present", [])],
            third_molar_evidence=bool(d.get("third_molar_evidence", False)),
            anatomical_counts={k: int(v) for k, v in d.get("anatomical_counts", {}).items()},
            size_counts={k: int(v) for k, v in d.get("size_counts", {}).items()},
            dentition_stage=d.get("dentition_stage", ""),
            anomalies=anomalies,
            special_conditions=list(d.get("special_conditions", [])),
            notes=d.get("notes", "") or "",
        )


def report_from_codes(arch: str, codes, ontology: DentalOntology | None = None, *, stage: str = "permanent",
                      anomalies: list[Anomaly] | None = None, third_molar_evidence: bool | None = None,
                      special_conditions: list[str] | None = None, notes: str = "") -> StructuredReport:
    """Consistent report whose counts are derived from the FDI codes."""
    ontology = ontology or _default()
    codes = sorted(int(c) for c in codes)
    regions = {r: 0 for r in REGIONS}
    sizes = {s: 0 for s in SIZES}
    for c in codes:
        regions[region_of(c, ontology)] += 1
        sizes[size_of(c, ontology)] += 1
    if third_molar_evidence is None:
        third_molar_evidence = any(c % 10 == 8 for c in codes)
    return StructuredReport(
        arch=arch,
        teeth_number=len(codes),
        fdi_present=codes,
        third_molar_evidence=third_molar_evidence,
        anatomical_counts=regions,
        size_counts=sizes,
        dentition_stage=stage,
        anomalies=list(anomalies or []),
        special_conditions=list(special_conditions or []),
        notes=notes,
    )


@dataclass(frozen=True)
class Violation:
    rule_id: str
    severity: str
    detail: str

    def __post_init__(self):
        if self.rule_id not in RULE_IDS:
            raise ValueError(f"unknown rule_id {self.rule_id!r}")
        if self.severity not in ("error", "warning"):
            raise ValueError(f"unknown severity {self.severity!r}")

    def to_dict(self) -> dict:
        return {"rule_id": self.rule_id, "severity": self.severity, "detail": self.detail}


def vocabulary_problems(report: StructuredReport, ontology: DentalOntology) -> list[str]:
    """Labels outside the ontology's closed vocabularies (hallucinations)."""
    problems = []
    if report.arch not in ARCHES:
        problems.append(f"arch {report.arch!r}")
    if report.dentition_stage not in STAGES:
        problems.append(f"dentition_stage {report.dentition_stage!r}")
    problems += [f"region {k!r}" for k in report.anatomical_counts if k not in REGIONS]
    problems += [f"size class {k!r}" for k in report.size_counts if k not in SIZES]
    problems += [f"anomaly kind {a.kind!r}" for a in report.anomalies if a.kind not in ontology.anomaly_kinds]
    codes = ontology.all_codes
    problems += [f"FDI code {c}" for c in report.fdi_present if c not in codes]
    problems += [f"anomaly FDI code {a.fdi}" for a in report.anomalies if a.fdi is not None and a.fdi not in codes]
    return problems


def _fdi_validity(report: StructuredReport, ontology: DentalOntology) -> list[str]:
    issues = vocabulary_problems(report, ontology)
    codes = ontology.all_codes
    present = report.fdi_present
    dupes = sorted({c for c in present if present.count(c) > 1})
    if dupes:
        issues.append(f"duplicate codes {dupes}")
    quads = ARCH_QUADRANTS.get(report.arch)
    if quads is not None:
        wrong = sorted(c for c in present if c in codes and c // 10 not in quads)
        if wrong:
            issues.append(f"codes {wrong} belong to the opposing arch")
    return issues


def _absences(report: StructuredReport) -> int:
    return sum(1 for a in report.anomalies if a.kind in _ABSENCE_KINDS)


def validate_report(report: StructuredReport, ontology: DentalOntology | None = None) -> list[Violation]:
    """Check a report against the ontology. At most one violation per rule."""
    ontology = ontology or _default()
    out: list[Violation] = []
    present = [c for c in report.fdi_present if c in ontology.all_codes]
    present_set = set(present)

    third = sorted(c for c in present if c in ontology.valid_fdi and c % 10 == 8)
    if third and not report.third_molar_evidence:
        out.append(Violation("conditional-inclusion", "error",
                             f"third molars {third} reported without visual evidence"))

    # Primary and permanent quadrants of one side share position slots.
    documented = {a.fdi for a in report.anomalies if a.fdi is not None}
    gaps = []
    for side in range(1, 5):
        slots = {c % 10 for c in present_set if c // 10 in (side, side + 4)}
        if not slots:
            continue
        for pos in range(1, max(slots)):
            if pos in slots:
                continue
            candidates = {10 * side + pos} | ({10 * (side + 4) + pos} if pos <= 5 else set())
            if not candidates & documented:
                gaps.append(10 * side + pos)
    if gaps:
        out.append(Violation("numbering-continuity", "error",
                             f"undocumented gaps at {sorted(gaps)}"))

    problems = []
    if report.fdi_present and report.teeth_number != len(report.fdi_present):
        problems.append(f"teeth_number {report.teeth_number} != {len(report.fdi_present)} listed codes")
    for name, counts in (("anatomical", report.anatomical_counts), ("size", report.size_counts)):
        if counts and sum(counts.values()) != report.teeth_number:
            problems.append(f"{name} counts sum to {sum(counts.values())}, teeth_number is {report.teeth_number}")
    if present and len(present) == len(report.fdi_present):
        derived_r = {r: 0 for r in REGIONS}
        derived_s = {s: 0 for s in SIZES}
        for c in present:
            derived_r[region_of(c, ontology)] += 1
            derived_s[size_of(c, ontology)] += 1
        for name, counts, derived in (("anatomical", report.anatomical_counts, derived_r),
                                      ("size", report.size_counts, derived_s)):
            if counts and any(counts.get(k, 0) != v for k, v in derived.items()):
                problems.append(f"{name} counts {counts} disagree with codes ({derived})")
    if problems:
        out.append(Violation("count-consistency", "error", "; ".join(problems)))

    issues = _fdi_validity(report, ontology)
    if issues:
        out.append(Violation("fdi-validity", "error", "out of vocabulary: " + ", ".join(issues)))

    stage = report.dentition_stage
    if stage in ontology.stage_policies:
        policy = ontology.stage_policies[stage]
        if policy.per_arch is not None:
            lo, hi = policy.per_arch
            lo = max(0, lo - _absences(report))
            n = report.teeth_number
            if not lo <= n <= hi:
                severity = "warning" if policy.variable else "error"
                out.append(Violation("stage-count-range", severity,
                                     f"{n} teeth outside [{lo}, {hi}] for a {stage} arch"))

    unplaced = [a for a in report.anomalies if a.kind == "extracted" and not a.position.strip()]
    if unplaced:
        out.append(Violation("positional-annotation", "warning",
                             f"{len(unplaced)} extracted tooth entries lack position text"))

    deciduous = sorted(c for c in present if c in DECIDUOUS_FDI)
    permanent = sorted(c for c in present if c in PERMANENT_FDI)
    mismatch = None
    if stage == "permanent" and deciduous:
        mismatch = f"primary teeth {deciduous} in a permanent arch"
    elif stage == "deciduous" and permanent:
        mismatch = f"permanent teeth {permanent} in a deciduous arch"
    elif stage == "mixed" and present and not (deciduous and permanent):
        mismatch = "mixed stage but only one dentition is listed"
    if mismatch:
        out.append(Violation("morphology-stage", "warning", mismatch))
    return out


# ---------------------------------------------------------------- schemas and prompt


def report_schema(ontology: DentalOntology | None = None) -> dict:
    """Strict JSON schema for a report, vocabularies drawn from the ontology."""
    ontology = ontology or _default()
    codes = sorted(ontology.all_codes)
    count = {"type": "integer", "minimum": 0}
    return {
        "$schema": "https://json-schema.org/draft/2020-12/schema",
        "title": "DentalArchReport",
        "type": "object",
        "additionalProperties": False,
        "required": list(REPORT_FIELDS),
        "properties": {
            "arch": {"type": "string", "enum": list(ARCHES)},
            "teeth_number": count,
            "fdi_present": {"type": "array", "items": {"type": "integer", "enum": codes}, "uniqueItems": True},
            "third_molar_evidence": {"type": "boolean"},
            "anatomical_counts": {
                "type": "object", "additionalProperties": False, "required": list(REGIONS),
                "properties": {r: count for r in REGIONS},
            },
            "size_counts": {
                "type": "object", "additionalProperties": False, "required": list(SIZES),
                "properties": {s: count for s in SIZES},
            },
            "dentition_stage": {"type": "string", "enum": list(STAGES)},
            "anomalies": {
                "type": "array",
                "items": {
                    "type": "object", "additionalProperties": False, "required": ["kind", "fdi", "position", "note"],
                    "properties": {
                        "kind": {"type": "string", "enum": list(ontology.anomaly_kinds)},
                        "fdi": {"type": ["integer", "null"]},
                        "position": {"type": "string"},
                        "note": {"type": "string"},
                    },
                },
            },
            "special_conditions": {"type": "array", "items": {"type": "string"}},
            "notes": {"type": "string"},
        },
    }


def structural_schema() -> dict:
    """Types and required keys only; vocabulary is judged by validate_report."""
    count = {"type": "integer", "minimum": 0}
    return {
        "type": "object",
        "required": list(REPORT_FIELDS),
        "properties": {
            "arch": {"type": "string"},
            "teeth_number": count,
            "fdi_present": {"type": "array", "items": {"type": "integer"}},
            "third_molar_evidence": {"type": "boolean"},
            "anatomical_counts": {"type": "object", "additionalProperties": count},
            "size_counts": {"type": "object", "additionalProperties": count},
            "dentition_stage": {"type": "string"},
            "anomalies": {
                "type": "array",
                "items": {
                    "type": "object", "required": ["kind"],
                    "properties": {
                        "kind": {"type": "string"},
                        "fdi": {"type": ["integer", "null"]},
                        "position": {"type": ["string", "null"]},
                        "note": {"type": ["string", "null"]},
                    },
                },
            },
            "special_conditions": {"type": "array", "items": {"type": "string"}},
            "notes": {"type": "string"},
        },
    }


def arch_declaration(arch_side: str) -> str:
    if arch_side not in ARCHES:
        raise ValueError(f"arch_side must be one of {ARCHES}")
    jaw = "maxillary" if arch_side == "upper" else "mandibular"
    return (f"The images show only the {arch_side} ({jaw}) dentition. "
            f"Report on the {arch_side} arch alone.")


def _codes(codes) -> str:
    return ", ".join(str(c) for c in codes)


def render_prompt(ontology: DentalOntology, arch_side: str, task_schema: dict) -> str:
    """Deterministic knowledge-constrained prompt for one arch."""
    lines = [
        "You analyse three rendered views (front, back, bottom) of one digital dental arch scan "
        "and return a structured report.",
        "",
        arch_declaration(arch_side),
        "",
        "Work through these stages in order:",
    ]
    for i, (title, text) in enumerate(STAGE_INSTRUCTIONS, 1):
        lines.append(f"{i}. {title}: {text}")

    lines += ["", "Dental knowledge base", "", "Tooth count by dentition stage:"]
    for stage in STAGES:
        p = ontology.stage_policies[stage]
        if p.variable:
            lines.append(f"- {stage}: variable, no fixed total")
        else:
            lines.append(f"- {stage}: total {p.total[0]}-{p.total[1]}, per arch {p.per_arch[0]}-{p.per_arch[1]}, "
                         f"per quadrant {p.per_quadrant[0]}-{p.per_quadrant[1]}")
    if ontology.stage_descriptions:
        lines += ["", "Dentition stages:"]
        lines += [f"- {s}: {ontology.stage_descriptions[s]}" for s in STAGES if s in ontology.stage_descriptions]
    lines += ["", "Anatomical classification (FDI):"]
    lines += [f"- {r}: {_codes(ontology.codes_in_region(r))}" for r in REGIONS]
    lines += ["", "Size classification (FDI):"]
    lines += [f"- {s}: {_codes(ontology.codes_in_size(s))}" for s in SIZES]
    if ontology.deciduous_region_map:
        lines += ["", "Primary teeth (FDI 51-85) take the region and size of their class:"]
        for r in REGIONS:
            codes = sorted(c for c, v in ontology.deciduous_region_map.items() if v == r)
            if codes:
                lines.append(f"- {r}: {_codes(codes)}")
    lines += ["", "Anomaly kinds: " + ", ".join(ontology.anomaly_kinds)]

    lines += ["", "Special rules:"]
    lines += [f"{i}. {rule}" for i, rule in enumerate(ontology.special_rules, 1)]

    lines += ["", "Return one JSON object that conforms to this schema:",
              json.dumps(task_schema, indent=2, sort_keys=False), "",
              "Output the JSON object only."]
    return "\n".join(lines)


def minimal_prompt(arch_side: str, task_schema: dict) -> str:
    """Prompt without knowledge-base tables or rules (ablation baseline)."""
    return "\n".join([
        "You analyse three rendered views (front, back, bottom) of one digital dental arch scan "
        "and return a structured report.",
        "",
        arch_declaration(arch_side),
        "",
        "Return one JSON object that conforms to this schema:",
        json.dumps(task_schema, indent=2, sort_keys=False),
        "",
        "Output the JSON object only.",
    ])


def violations_to_list(violations: list[Violation]) -> list[dict[str, Any]]:
    return [v.to_dict() for v in violations]
