"""
Test-case selection, labelling, stratified splits, class weights and synthetic
desk-scale fixtures.
"""

import re
from collections import Counter
from dataclasses import dataclass, field, replace
from typing import Dict, List, Optional, Sequence, Tuple

import numpy as np
import yaml

from errors import ConfigError, DataError, EmptyCorpusError, SplitError
from ir_normalizer import BAD, GOOD, parse_module, standardize_function
from log_utils import log_metric, log_with_timestamp

BINARY = "binary"
MULTICLASS = "multiclass"
MODES = (BINARY, MULTICLASS)

DEFAULT_RATIOS = (0.70, 0.15, 0.15)

# Juliet naming: the last '_'-separated part of a test-case function starts with bad/good
DEFAULT_BAD_PATTERNS = (r"(^|_)bad\w*$",)
DEFAULT_GOOD_PATTERNS = (r"(^|_)good\w*$",)

# Flawed CWEs in descending frequency of the selected corpus
JULIET_CWES = (
    122, 190, 121, 191, 457, 134, 590, 762, 78, 23, 124, 36,
    194, 195, 127, 401, 400, 369, 126, 680, 415, 197, 690,
)


@dataclass(frozen=True)
class SampleRecord:
    id: str
    tokens: Tuple[str, ...]
    cwe_id: int
    flaw_label: str
    function_name: str = ""
    source_path: str = ""
    multiclass_label: Optional[int] = None
    label: Optional[int] = None

    @property
    def binary_label(self):
        return 1 if self.flaw_label == BAD else 0

    @classmethod
    def from_stream(cls, stream):
        return cls(
            id=stream.id,
            tokens=tuple(stream.tokens),
            cwe_id=stream.cwe_id,
            flaw_label=stream.flaw_label,
            function_name=stream.function_name,
            source_path=stream.source_path,
        )

    def to_record(self):
        return {
            "id": self.id,
            "function_name": self.function_name,
            "cwe_id": self.cwe_id,
            "flaw_label": self.flaw_label,
            "source_path": self.source_path,
            "tokens": list(self.tokens),
            "binary_label": self.binary_label,
            "multiclass_label": self.multiclass_label,
            "label": self.label,
        }

    @classmethod
    def from_record(cls, record):
        return cls(
            id=record["id"],
            tokens=tuple(record["tokens"]),
            cwe_id=record.get("cwe_id"),
            flaw_label=record.get("flaw_label"),
            function_name=record.get("function_name", ""),
            source_path=record.get("source_path", ""),
            multiclass_label=record.get("multiclass_label"),
            label=record.get("label"),
        )


@dataclass
class CorpusManifest:
    samples: List[SampleRecord]
    selection_log: List[Tuple[str, int]] = field(default_factory=list)
    mode: Optional[str] = None
    label_map: Dict[int, int] = field(default_factory=dict)  # cwe_id -> class index

    @property
    def labels(self):
        return [s.label for s in self.samples]

    @property
    def class_counts(self):
        """Counts per class label once labelled, per CWE before"""
        if self.mode is None:
            return dict(sorted(Counter(s.cwe_id for s in self.samples).items()))
        return dict(sorted(Counter(s.label for s in self.samples).items()))

    @property
    def num_classes(self):
        if self.mode == BINARY:
            return 2
        if self.mode == MULTICLASS:
            return len(self.label_map) + 1
        raise ValueError("Manifest has no labels yet")

    def class_names(self):
        if self.mode == BINARY:
            return ["0", "1"]
        by_index = {index: cwe for cwe, index in self.label_map.items()}
        names = ["0"]
        for index in range(1, self.num_classes):
            names.append(f"{index} (CWE-{by_index[index]})")
        return names

    def header_meta(self):
        return {
            "mode": self.mode,
            "label_map": {str(k): v for k, v in sorted(self.label_map.items())},
            "selection_log": [list(step) for step in self.selection_log],
        }

    @classmethod
    def from_records(cls, records, meta=None):
        meta = meta or {}
        return cls(
            samples=[SampleRecord.from_record(r) for r in records],
            selection_log=[tuple(step) for step in meta.get("selection_log", [])],
            mode=meta.get("mode"),
            label_map={int(k): int(v) for k, v in (meta.get("label_map") or {}).items()},
        )


@dataclass
class NamePatterns:
    """Regular expressions selecting the test-case functions related to the weakness"""
    bad: Sequence[str] = DEFAULT_BAD_PATTERNS
    good: Sequence[str] = DEFAULT_GOOD_PATTERNS

    def matches(self, record):
        patterns = self.bad if record.flaw_label == BAD else self.good
        return any(re.search(p, record.function_name) for p in patterns)


@dataclass
class DatasetSplit:
    train: np.ndarray
    test: np.ndarray
    validation: np.ndarray
    ratios: Tuple[float, float, float] = DEFAULT_RATIOS
    seed: int = 0

    def parts(self):
        return {"train": self.train, "test": self.test, "validation": self.validation}

    def save(self, path):
        with open(path, "w", encoding="utf-8", newline="\n") as out:
            ratios = ",".join(f"{r:.2f}" for r in self.ratios)
            out.write(f"# seed={self.seed} ratios={ratios}\n")
            for name, indices in self.parts().items():
                out.write(f"{name}: {' '.join(str(int(i)) for i in indices)}\n")

    @classmethod
    def load(cls, path):
        parts = {}
        seed, ratios = 0, DEFAULT_RATIOS
        with open(path, "r", encoding="utf-8") as stream:
            for line in stream:
                line = line.rstrip("\n")
                if line.startswith("#"):
                    fields = dict(item.split("=", 1) for item in line[1:].split())
                    seed = int(fields["seed"])
                    ratios = tuple(float(r) for r in fields["ratios"].split(","))
                elif line:
                    name, _, values = line.partition(":")
                    parts[name.strip()] = np.array([int(v) for v in values.split()], dtype=np.int64)
        return cls(parts["train"], parts["test"], parts["validation"], ratios, seed)


@dataclass
class ClassWeights:
    weights: Dict[int, float]

    def as_array(self, num_classes):
        return np.array([self.weights.get(c, 0.0) for c in range(num_classes)], dtype=np.float64)


def select_samples(records, min_class_count=500, min_tokens=300, excluded_cwes=frozenset(),
                   name_patterns=None, absent_cwes=frozenset()):
    """
    Apply the test-case selection filters in order:
      1. drop excluded (Windows-specific) CWEs
      2. keep only functions whose names mark them as related to the weakness
      3. drop CWEs with fewer than min_class_count test cases
      4. drop samples shorter than min_tokens tokens
      5. drop weaknesses that do not survive compilation
    Because the length filter runs after the class-count filter, a CWE may end
    below min_class_count.
    """
    samples = [r for r in records if r.cwe_id is not None and r.flaw_label in (GOOD, BAD)]
    log = [("missing_metadata", len(records) - len(samples))]

    def step(name, keep):
        nonlocal samples
        before = len(samples)
        samples = [r for r in samples if keep(r)]
        log.append((name, before - len(samples)))

    excluded = set(excluded_cwes)
    step("excluded_cwes", lambda r: r.cwe_id not in excluded)

    if name_patterns is not None:
        step("function_name_patterns", name_patterns.matches)
    else:
        log.append(("function_name_patterns", 0))

    counts = Counter(r.cwe_id for r in samples)
    step("min_class_count", lambda r: counts[r.cwe_id] >= min_class_count)
    step("min_tokens", lambda r: len(r.tokens) >= min_tokens)

    absent = set(absent_cwes)
    step("absent_after_compilation", lambda r: r.cwe_id not in absent)

    for name, removed in log:
        log_metric("selection", step=name, removed=removed)
    if not samples:
        raise EmptyCorpusError("No samples survived test-case selection")
    log_with_timestamp(f"✅ Selected {len(samples)} of {len(records)} samples")
    return CorpusManifest(samples=samples, selection_log=log)


def load_label_map(path):
    """YAML mapping cwe_id -> class index (1..K), e.g. to fix the class numbering"""
    with open(path, "r", encoding="utf-8") as stream:
        data = yaml.safe_load(stream) or {}
    return {int(k): int(v) for k, v in data.items()}


def _default_label_map(samples):
    flawed = Counter(s.cwe_id for s in samples if s.flaw_label == BAD)
    ordered = sorted(flawed.items(), key=lambda item: (-item[1], item[0]))
    return {cwe: index for index, (cwe, _) in enumerate(ordered, start=1)}


def assign_labels(manifest, mode, label_map=None):
    """Label every sample: 0 for good, 1 for bad (binary) or 1..K by CWE (multiclass)"""
    if mode not in MODES:
        raise ConfigError(f"Unknown mode '{mode}', expected one of {MODES}")
    if not manifest.samples:
        raise EmptyCorpusError("Cannot label an empty manifest")

    if label_map is None:
        label_map = _default_label_map(manifest.samples)
    else:
        label_map = dict(label_map)
        flawed = {s.cwe_id for s in manifest.samples if s.flaw_label == BAD}
        missing = sorted(flawed - set(label_map))
        if missing:
            raise ConfigError(f"Label map has no class for CWEs {missing}")
        label_map = {cwe: index for cwe, index in label_map.items() if cwe in flawed}
        if sorted(label_map.values()) != list(range(1, len(label_map) + 1)):
            raise ConfigError("Label map indices must be dense 1..K over the flawed CWEs")

    labelled = []
    for s in manifest.samples:
        multiclass = 0 if s.flaw_label == GOOD else label_map[s.cwe_id]
        label = s.binary_label if mode == BINARY else multiclass
        labelled.append(replace(s, multiclass_label=multiclass, label=label))

    return CorpusManifest(
        samples=labelled,
        selection_log=list(manifest.selection_log),
        mode=mode,
        label_map=dict(sorted(label_map.items())),
    )


def _round_half_up(x):
    return int(np.floor(x + 0.5))


def split_dataset(n, labels, ratios=DEFAULT_RATIOS, seed=0):
    """Stratified, seeded train/test/validation split of indices 0..n-1"""
    labels = np.asarray(labels)
    if len(labels) != n:
        raise ValueError(f"Got {len(labels)} labels for {n} samples")
    if n < 3:
        raise SplitError(f"Need at least 3 samples to split, got {n}")
    if len(ratios) != 3 or abs(sum(ratios) - 1.0) > 1e-9:
        raise ValueError(f"Split ratios must be three values summing to 1, got {ratios}")

    rng = np.random.default_rng(seed)
    parts = ([], [], [])
    for cls in sorted(set(labels.tolist())):
        members = np.flatnonzero(labels == cls)
        if len(members) < 3:
            raise SplitError(f"Class {cls} has {len(members)} samples, at least 3 are needed to split")
        members = rng.permutation(members)
        n_train = _round_half_up(len(members) * ratios[0])
        n_test = _round_half_up(len(members) * ratios[1])
        parts[0].append(members[:n_train])
        parts[1].append(members[n_train:n_train + n_test])
        parts[2].append(members[n_train + n_test:])

    train, test, validation = (np.sort(np.concatenate(p)).astype(np.int64) for p in parts)
    return DatasetSplit(train, test, validation, tuple(ratios), seed)


def compute_class_weights(labels, num_classes=None):
    """Balanced inverse-frequency weights N / (K * n_c)"""
    counts = Counter(int(label) for label in labels)
    if not counts:
        raise DataError("Cannot weight an empty label list")
    classes = range(num_classes) if num_classes is not None else sorted(counts)
    missing = [c for c in classes if counts.get(c, 0) == 0]
    if missing:
        raise DataError(f"Classes {missing} have no samples")
    total = sum(counts[c] for c in classes)
    k = len(classes)
    return ClassWeights({c: total / (k * counts[c]) for c in classes})


def format_selection_log(selection_log):
    width = max(len(name) for name, _ in selection_log)
    lines = [f"{'filter'.ljust(width)}  removed"]
    for name, removed in selection_log:
        lines.append(f"{name.ljust(width)}  {removed:>7}")
    return "\n".join(lines) + "\n"


def cwe_table(manifest):
    """Per-CWE #bad / #good / #total / share, sorted by descending total"""
    bad = Counter(s.cwe_id for s in manifest.samples if s.flaw_label == BAD)
    good = Counter(s.cwe_id for s in manifest.samples if s.flaw_label == GOOD)
    total = len(manifest.samples)
    rows = []
    for cwe in set(bad) | set(good):
        n = bad[cwe] + good[cwe]
        rows.append((cwe, bad[cwe], good[cwe], n, n / total))
    rows.sort(key=lambda row: (-row[3], row[0]))
    return rows


def format_cwe_table(rows):
    lines = ["CWE ID   # bad  # good  # total  % of total"]
    for cwe, n_bad, n_good, n, share in rows:
        lines.append(f"{cwe:>6}  {n_bad:>6}  {n_good:>6}  {n:>7}  {share * 100:>9.2f}%")
    return "\n".join(lines) + "\n"


def corpus_statistics(samples):
    total = sum(len(s.tokens) for s in samples)
    unique = len({t for s in samples for t in s.tokens})
    return {"samples": len(samples), "total_tokens": total, "unique_tokens": unique}


# Synthetic fixtures

FILLER_CALLS = ("printf", "malloc", "free", "strlen", "puts")
MOTIF_CALLS = ("memcpy", "strcpy", "strncat", "memmove", "wcscpy", "fgets", "sprintf", "recv")
_DECLARATIONS = {
    "printf": "declare i32 @printf(i8*, ...)",
    "malloc": "declare i8* @malloc(i64)",
    "free": "declare void @free(i8*)",
    "strlen": "declare i64 @strlen(i8*)",
    "puts": "declare i32 @puts(i8*)",
}


def _motif_line(class_index, var, target):
    call = MOTIF_CALLS[(class_index - 1) % len(MOTIF_CALLS)]
    size = 10 + class_index - 1
    return f"  %v{var} = call i8* @{call}(i8* %v{target}, i64 {size})"


def _fixture_body(rng, helper, class_index, with_motif, lines):
    body = ["dec_label_pc_401000:", "  %v1 = alloca i32, align 4"]
    var = 2
    for _ in range(int(rng.integers(lines[0], lines[1] + 1))):
        source = int(rng.integers(1, var))
        number = int(rng.integers(0, 100))
        kind = int(rng.integers(0, 6))
        if kind == 0:
            body.append(f"  store i32 {number}, i32* %v1, align 4")
            continue
        if kind == 1:
            body.append(f"  %v{var} = load i32, i32* @global_var_{number % 3 + 1}, align 4")
        elif kind == 2:
            body.append(f"  %v{var} = add i32 %v{source}, {number}")
        elif kind == 3:
            body.append(f"  %v{var} = icmp slt i32 %v{source}, {number}")
        elif kind == 4:
            call = FILLER_CALLS[number % len(FILLER_CALLS)]
            body.append(f"  %v{var} = call i32 @{call}(i32 %v{source})")
        else:
            body.append(f"  %v{var} = mul i32 %v{source}, -{number + 1}")
        var += 1
    if with_motif:
        body.append(_motif_line(class_index, var, 1))
    body.append(f"  call void @{helper}()")
    body.append("  br label %dec_label_pc_401100")
    body.append("dec_label_pc_401100:")
    body.append("  ret i32 0")
    return body


def generate_fixture_modules(seed, classes, per_class, motif_strength=1.0, lines=(6, 12)):
    """
    Synthetic IR modules with Juliet-style file names. Class 0 is non-flawed; every
    flawed class k carries (with probability motif_strength) its own call/constant
    motif near the end of the function. Returns [(file name, function name, ir text)].
    """
    if classes < 2 or classes > len(JULIET_CWES) + 1:
        raise ValueError(f"classes must be in 2..{len(JULIET_CWES) + 1}, got {classes}")
    if per_class < 1:
        raise ValueError(f"per_class must be >= 1, got {per_class}")

    rng = np.random.default_rng(seed)
    flawed_cwes = JULIET_CWES[:classes - 1]
    modules = []
    for class_index in range(classes):
        for i in range(per_class):
            if class_index == 0:
                cwe, flaw = flawed_cwes[i % len(flawed_cwes)], GOOD
            else:
                cwe, flaw = flawed_cwes[class_index - 1], BAD
            stem = f"fixture_{class_index:02d}_{i:04d}"
            name = f"CWE{cwe}_{stem}_{flaw}"
            helper = f"helper_{stem}"
            with_motif = class_index > 0 and rng.random() < motif_strength
            body = _fixture_body(rng, helper, class_index, with_motif, lines)

            used = sorted(set(MOTIF_CALLS))
            text = [
                f"; ModuleID = '{stem}'",
                f'source_filename = "{stem}.c"',
                "",
                "@global_var_1 = global i32 0",
                "@global_var_2 = global i32 0",
                "@global_var_3 = global i32 0",
                "",
                f"define void @{helper}() {{",
                "dec_label_pc_402000:",
                "  ret void",
                "}",
                "",
                f"define i32 @{name}() {{",
                *body,
                "}",
                "",
                *(_DECLARATIONS[c] for c in FILLER_CALLS),
                *(f"declare i8* @{c}(i8*, i64)" for c in used),
                "",
            ]
            modules.append((f"CWE{cwe}__{stem}__{flaw}.ll", name, "\n".join(text)))
    return modules


def generate_fixture(seed, classes, per_class, motif_strength=1.0, lines=(6, 12)):
    """Desk-scale labelled corpus built by normalising synthetic IR modules"""
    records = []
    for file_name, function_name, text in generate_fixture_modules(
            seed, classes, per_class, motif_strength, lines):
        module = parse_module(text, file_name)
        fn = next(f for f in module.functions if f.name == function_name)
        cwe = int(file_name.split("__")[0][3:])
        flaw = file_name.rsplit("__", 1)[1][:-3]
        records.append(SampleRecord.from_stream(standardize_function(fn, module, cwe, flaw)))
    manifest = CorpusManifest(samples=records, selection_log=[])
    return assign_labels(manifest, MULTICLASS)
