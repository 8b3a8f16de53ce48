#!/usr/bin/env python3
"""
Datasets: aligned modalities, labels, the seen/unseen split and class prototypes.

A dataset is assembled from an INI manifest::

    [dataset]
    labels = labels.txt

    [split]
    seen = 0, 1
    unseen = 2

    [modality:visual]
    kind = visual
    path = visual.lsem

    [modality:attributes]
    kind = semantic

    [prototypes:attributes]
    path = attributes.lsem
    class_ids = 0, 1, 2

    [class_names]
    0 = zebra

A semantic modality without ``path`` is expanded from its prototypes: column
``j`` is the prototype of instance ``j``'s class.
"""
import logging
from dataclasses import dataclass, field
from pathlib import Path

import numpy as np

from .base import BaseService, new_config, parse_id_list, read_ini, write_ini, format_list
from .exceptions import ValidationError
from .matrices import ModalityMatrix, PrototypeMatrix, load_matrix, load_prototypes, save_matrix

logger = logging.getLogger('lse')

MODALITY_PREFIX = "modality:"
PROTOTYPE_PREFIX = "prototypes:"


@dataclass(frozen=True, eq=False)
class LabelVector:
    labels: np.ndarray

    def __post_init__(self):
        labels = np.array(self.labels, dtype=np.int64, copy=True).reshape(-1)
        if labels.size and labels.min() < 0:
            raise ValidationError("labels must be integer ids >= 0", contract="label-range")
        labels.setflags(write=False)
        object.__setattr__(self, 'labels', labels)

    def __len__(self):
        return self.labels.size

    def classes(self):
        """Distinct labels in ascending order"""
        return [int(c) for c in np.unique(self.labels)]


@dataclass(frozen=True)
class ClassSplit:
    seen: tuple
    unseen: tuple

    def __post_init__(self):
        seen = tuple(dict.fromkeys(int(c) for c in self.seen))
        unseen = tuple(dict.fromkeys(int(c) for c in self.unseen))
        overlap = sorted(set(seen) & set(unseen))
        if overlap:
            raise ValidationError(f"seen/unseen overlap: classes {overlap} are in both sets", contract="seen/unseen overlap")
        object.__setattr__(self, 'seen', seen)
        object.__setattr__(self, 'unseen', unseen)

    @property
    def total(self):
        return tuple(sorted(self.seen + self.unseen))

    def candidates(self, which):
        """Class ids for a candidate set name: seen, unseen or total"""
        if which == "seen":
            return tuple(sorted(self.seen))
        if which == "unseen":
            return tuple(sorted(self.unseen))
        if which == "total":
            return self.total
        raise ValidationError(f"unknown candidate set {which!r}", contract="candidate-set")


def expand_prototypes(prototypes, labels, name=None):
    """Instance-aligned semantic matrix: column j is the prototype of labels[j]"""
    labels = labels.labels if isinstance(labels, LabelVector) else np.asarray(labels)
    return ModalityMatrix(name or prototypes.modality_name, prototypes.columns_for(list(labels)), "semantic")


@dataclass(frozen=True, eq=False)
class Dataset:
    modalities: tuple
    labels: LabelVector
    split: ClassSplit
    prototypes: tuple
    class_names: dict = field(default_factory=dict)

    def __post_init__(self):
        modalities = tuple(self.modalities)
        prototypes = tuple(self.prototypes)
        object.__setattr__(self, 'modalities', modalities)
        object.__setattr__(self, 'prototypes', prototypes)
        if not isinstance(self.labels, LabelVector):
            object.__setattr__(self, 'labels', LabelVector(self.labels))
        object.__setattr__(self, 'class_names', {int(k): str(v) for k, v in dict(self.class_names).items()})
        self._validate()

    def _validate(self):
        if not self.modalities:
            raise ValidationError("dataset needs at least one modality", contract="modalities")
        if self.modalities[0].kind != "visual":
            raise ValidationError(f"modality 0 ({self.modalities[0].name}) must be the visual modality", contract="visual-first")
        names = [m.name for m in self.modalities]
        if len(set(names)) != len(names):
            raise ValidationError(f"duplicate modality names {names}", contract="modality-names")
        counts = {m.name: m.cols for m in self.modalities}
        if len(set(counts.values())) != 1:
            raise ValidationError(f"instance misalignment: modality instance counts {counts}", contract="instance misalignment")
        n = self.modalities[0].cols
        if len(self.labels) != n:
            raise ValidationError(f"label count {len(self.labels)} does not match instance count {n}", contract="label count")
        known = set(self.split.seen) | set(self.split.unseen)
        unknown = sorted(set(self.labels.classes()) - known)
        if unknown:
            raise ValidationError(f"labels {unknown} are in neither the seen nor the unseen set", contract="unknown label")
        by_name = {m.name: m for m in self.modalities}
        proto_names = [p.modality_name for p in self.prototypes]
        if len(set(proto_names)) != len(proto_names):
            raise ValidationError(f"duplicate prototype matrices for {proto_names}", contract="prototype-names")
        for protos in self.prototypes:
            modality = by_name.get(protos.modality_name)
            if modality is None:
                raise ValidationError(f"prototypes reference unknown modality {protos.modality_name}", contract="prototype-modality")
            if modality.kind != "semantic":
                raise ValidationError(f"prototypes given for non-semantic modality {protos.modality_name}", contract="prototype-modality")
            if protos.dim != modality.rows:
                raise ValidationError(
                    f"prototype dimensionality {protos.dim} does not match modality {modality.name} rows {modality.rows}",
                    contract="prototype dimensionality")
            missing = sorted(c for c in known if not protos.has(c))
            if missing:
                raise ValidationError(f"missing prototype for classes {missing} in {protos.modality_name}", contract="missing prototype")
        for modality in self.modalities:
            if modality.kind == "semantic" and modality.name not in proto_names:
                raise ValidationError(f"missing prototype matrix for semantic modality {modality.name}", contract="missing prototype")

    @property
    def n_instances(self):
        return self.modalities[0].cols

    @property
    def visual(self):
        return self.modalities[0]

    @property
    def modality_names(self):
        return [m.name for m in self.modalities]

    @property
    def semantic_names(self):
        return [m.name for m in self.modalities if m.kind == "semantic"]

    def modality(self, name):
        for m in self.modalities:
            if m.name == name:
                return m
        raise ValidationError(f"unknown modality {name!r}; known: {self.modality_names}", contract="modality-name")

    def prototypes_for(self, name):
        for p in self.prototypes:
            if p.modality_name == name:
                return p
        raise ValidationError(f"no prototypes for modality {name!r}", contract="missing prototype")

    def class_name(self, class_id):
        return self.class_names.get(int(class_id), str(class_id))

    def indices_of(self, class_ids):
        """Instance indices whose label is in class_ids, in dataset order"""
        return np.flatnonzero(np.isin(self.labels.labels, list(class_ids)))

    def subset(self, indices):
        """Dataset restricted to the given instances, in the given order"""
        indices = np.asarray(indices, dtype=np.intp)
        return Dataset(tuple(m.select(indices) for m in self.modalities), LabelVector(self.labels.labels[indices]),
                       self.split, self.prototypes, self.class_names)

    def with_modalities(self, names):
        """Dataset keeping the visual modality plus the named modalities, in that order"""
        keep = [self.visual] + [self.modality(n) for n in names if n != self.visual.name]
        keep_names = {m.name for m in keep}
        return Dataset(tuple(keep), self.labels, self.split,
                       tuple(p for p in self.prototypes if p.modality_name in keep_names), self.class_names)

    def summary(self):
        return {
            "instances": self.n_instances,
            "modalities": [{"name": m.name, "kind": m.kind, "rows": m.rows} for m in self.modalities],
            "seen": list(self.split.seen),
            "unseen": list(self.split.unseen),
            "instances_per_class": {int(c): int(n) for c, n in zip(*np.unique(self.labels.labels, return_counts=True))},
        }


def resolve_manifest_path(path):
    """Accept a manifest file, the same path without .ini, or its directory"""
    path = Path(path)
    if path.is_dir():
        path = path / "manifest.ini"
    elif not path.exists() and path.with_suffix('.ini').exists():
        path = path.with_suffix('.ini')
    return path


def read_labels(path):
    path = Path(path)
    try:
        lines = path.read_text(encoding='utf-8').splitlines()
    except OSError as e:
        raise OSError(f"Cannot read label file {path}: {e}") from e
    except UnicodeDecodeError as e:
        raise ValidationError(f"label file {path} is not UTF-8 text: {e}", contract="label-format")
    labels = []
    for line_no, line in enumerate(lines, start=1):
        line = line.strip()
        if not line:
            continue
        try:
            labels.append(int(line))
        except ValueError:
            raise ValidationError(f"label file {path}, line {line_no}: {line!r} is not an integer", contract="label-format")
    return LabelVector(labels)


def write_labels(labels, path):
    labels = labels.labels if isinstance(labels, LabelVector) else labels
    Path(path).write_text("".join(f"{int(c)}\n" for c in labels), encoding='utf-8')


def assemble_dataset(manifest):
    """Build and validate a Dataset from a manifest file"""
    manifest = resolve_manifest_path(manifest)
    config = read_ini(manifest)
    root = manifest.parent

    def resolve(raw):
        p = Path(raw.strip())
        return p if p.is_absolute() else root / p

    for required in ("dataset", "split"):
        if not config.has_section(required):
            raise ValidationError(f"manifest {manifest} lacks a [{required}] section", contract="manifest-layout")
    if not config.has_option("dataset", "labels"):
        raise ValidationError(f"manifest {manifest} lacks dataset.labels", contract="manifest-layout")
    labels = read_labels(resolve(config.get("dataset", "labels")))
    split = ClassSplit(parse_id_list(config.get("split", "seen", fallback=""), "split.seen"),
                       parse_id_list(config.get("split", "unseen", fallback=""), "split.unseen"))

    prototypes = []
    for section in config.sections():
        if not section.startswith(PROTOTYPE_PREFIX):
            continue
        name = section[len(PROTOTYPE_PREFIX):]
        if not config.has_option(section, "path"):
            raise ValidationError(f"[{section}] lacks path", contract="manifest-layout")
        class_ids = parse_id_list(config.get(section, "class_ids", fallback=""), f"{section}.class_ids")
        prototypes.append(load_prototypes(resolve(config.get(section, "path")), name, class_ids))
    protos_by_name = {p.modality_name: p for p in prototypes}

    modalities = []
    for section in config.sections():
        if not section.startswith(MODALITY_PREFIX):
            continue
        name = section[len(MODALITY_PREFIX):]
        kind = config.get(section, "kind", fallback="visual").strip()
        if config.has_option(section, "path"):
            modalities.append(load_matrix(resolve(config.get(section, "path")), name, kind))
        elif kind == "semantic" and name in protos_by_name:
            modalities.append(expand_prototypes(protos_by_name[name], labels, name))
        else:
            raise ValidationError(f"[{section}] needs a path (only semantic modalities with prototypes may omit it)",
                                  contract="manifest-layout")
    if not modalities:
        raise ValidationError(f"manifest {manifest} declares no modalities", contract="modalities")
    # visual modalities lead, otherwise manifest order
    modalities.sort(key=lambda m: m.kind != "visual")

    class_names = {}
    if config.has_section("class_names"):
        for key, value in config.items("class_names"):
            class_names[parse_id_list(key, "class_names")[0]] = value
    dataset = Dataset(tuple(modalities), labels, split, tuple(prototypes), class_names)
    logger.info(f"Assembled dataset from {manifest}: {dataset.n_instances} instances, modalities {dataset.modality_names}")
    return dataset


def write_dataset(dataset, directory, name="dataset"):
    """Write matrices, labels and a manifest.ini for dataset; returns the manifest path"""
    directory = Path(directory)
    directory.mkdir(parents=True, exist_ok=True)
    config = new_config()
    config["dataset"] = {"name": name, "labels": "labels.txt"}
    config["split"] = {"seen": format_list(dataset.split.seen), "unseen": format_list(dataset.split.unseen)}
    write_labels(dataset.labels, directory / "labels.txt")
    for m in dataset.modalities:
        section = {"kind": m.kind}
        expanded = None
        if m.kind == "semantic":
            expanded = expand_prototypes(dataset.prototypes_for(m.name), dataset.labels).values
        if expanded is None or not np.array_equal(expanded, m.values):
            save_matrix(m, directory / f"{m.name}.lsem")
            section["path"] = f"{m.name}.lsem"
        config[f"{MODALITY_PREFIX}{m.name}"] = section
    for p in dataset.prototypes:
        save_matrix(p.vectors, directory / f"{p.modality_name}_prototypes.lsem")
        config[f"{PROTOTYPE_PREFIX}{p.modality_name}"] = {
            "path": f"{p.modality_name}_prototypes.lsem",
            "class_ids": format_list(p.class_ids),
        }
    if dataset.class_names:
        config["class_names"] = {str(k): v for k, v in sorted(dataset.class_names.items())}
    manifest = directory / "manifest.ini"
    write_ini(config, manifest)
    return manifest


class DatasetService(BaseService):
    """Handler for dataset and matrix file operations"""

    def describe(self, manifest):
        """Summarize a dataset manifest"""
        return self._run(f"reading manifest {manifest}", lambda: {"dataset": assemble_dataset(manifest).summary()})

    def convert_matrix(self, source, destination):
        """Convert a CSV or binary matrix file into the binary format"""
        def convert():
            m = load_matrix(source)
            save_matrix(m, destination)
            return {"rows": m.rows, "cols": m.cols, "path": str(destination)}
        return self._run(f"converting matrix {source}", convert)
