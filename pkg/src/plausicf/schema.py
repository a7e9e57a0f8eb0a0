"""Dataset schema: feature kinds, bounds, mutability and causal rules.

The schema is the single source of truth for how a tabular row is
interpreted: which columns are continuous, which are categorical, how raw
values map into the normalized [0, 1] model space, and which actionability
constraints (immutability, monotone direction, causal rules) apply.
"""

from __future__ import annotations

import json
import os
import tempfile
from dataclasses import dataclass
from enum import Enum
from typing import Optional, Sequence


class Monotone(str, Enum):
    NONE = "none"
    NON_DECREASING = "non_decreasing"
    NON_INCREASING = "non_increasing"


class Direction(str, Enum):
    INCREASE = "increase"
    DECREASE = "decrease"


class SchemaError(ValueError):
    """Raised for malformed schemas or rows that do not conform to one."""


@dataclass(frozen=True)
class FeatureKind:
    """Value domain of one feature.

    tag is one of:
      continuous  -- real value in [lb, ub]
      discrete    -- integer value in [lb, ub] (contiguous range)
      binary      -- 0/1 flag
      categorical -- one of `levels` (unordered)
      ordinal     -- one of `levels` (rank order = list order)
      mixed       -- either a real in [lb, ub] or one of `levels`
    """

    tag: str
    lb: float = 0.0
    ub: float = 1.0
    levels: tuple[str, ...] = ()

    CONTINUOUS_TAGS = ("continuous", "discrete", "mixed")
    CATEGORICAL_TAGS = ("categorical", "ordinal", "binary", "mixed")

    def __post_init__(self):
        if self.tag not in ("continuous", "discrete", "binary", "categorical", "ordinal", "mixed"):
            raise SchemaError(f"unknown feature kind {self.tag!r}")
        if self.tag in ("continuous", "discrete", "mixed") and not self.lb < self.ub:
            raise SchemaError(f"{self.tag} feature requires lb < ub, got [{self.lb}, {self.ub}]")
        if self.tag in ("categorical", "ordinal", "mixed"):
            if len(self.levels) < (1 if self.tag == "mixed" else 2):
                raise SchemaError(f"{self.tag} feature requires enough levels, got {self.levels}")
            if len(set(self.levels)) != len(self.levels):
                raise SchemaError(f"duplicate levels in {self.levels}")
        if self.tag == "discrete":
            if self.lb != int(self.lb) or self.ub != int(self.ub):
                raise SchemaError("discrete feature bounds must be integers")

    @property
    def has_continuous(self) -> bool:
        return self.tag in self.CONTINUOUS_TAGS

    @property
    def n_levels(self) -> int:
        if self.tag == "binary":
            return 2
        return len(self.levels)


def continuous(lb: float, ub: float) -> FeatureKind:
    return FeatureKind("continuous", lb=float(lb), ub=float(ub))


def discrete_contiguous(lb: int, ub: int) -> FeatureKind:
    return FeatureKind("discrete", lb=float(lb), ub=float(ub))


def binary() -> FeatureKind:
    return FeatureKind("binary")


def categorical(levels: Sequence[str]) -> FeatureKind:
    return FeatureKind("categorical", levels=tuple(levels))


def ordinal(levels: Sequence[str]) -> FeatureKind:
    return FeatureKind("ordinal", levels=tuple(levels))


def mixed(lb: float, ub: float, levels: Sequence[str]) -> FeatureKind:
    return FeatureKind("mixed", lb=float(lb), ub=float(ub), levels=tuple(levels))


@dataclass(frozen=True)
class FeatureSpec:
    """One feature: its kind plus normalization and actionability metadata.

    scale/shift map a raw value v to the normalized model space via
    ``v * scale + shift``; by default they realize min-max scaling of
    [lb, ub] onto [0, 1]. ``continuous_median`` is the normalized median of
    the continuous branch of a mixed feature, used as the anchor when the
    factual holds a categorical value.
    """

    name: str
    kind: FeatureKind
    mutable: bool = True
    monotone: Monotone = Monotone.NONE
    scale: Optional[float] = None
    shift: Optional[float] = None
    continuous_median: Optional[float] = None

    def __post_init__(self):
        if self.monotone != Monotone.NONE and self.kind.tag not in ("continuous", "ordinal", "discrete"):
            raise SchemaError(
                f"feature {self.name!r}: monotone direction only valid for "
                f"continuous, ordinal or discrete kinds, not {self.kind.tag}"
            )
        if self.scale is None and self.kind.has_continuous:
            object.__setattr__(self, "scale", 1.0 / (self.kind.ub - self.kind.lb))
            object.__setattr__(self, "shift", -self.kind.lb / (self.kind.ub - self.kind.lb))
        if self.scale is not None and self.scale <= 0:
            raise SchemaError(f"feature {self.name!r}: scale must be positive")
        if self.kind.tag == "mixed" and self.continuous_median is not None:
            if not 0.0 <= self.continuous_median <= 1.0:
                raise SchemaError(f"feature {self.name!r}: continuous_median must lie in [0, 1]")

    def to_normalized(self, raw: float) -> float:
        return raw * self.scale + self.shift

    def to_raw(self, normalized: float) -> float:
        return (normalized - self.shift) / self.scale


@dataclass(frozen=True)
class CausalRule:
    """If `cause` moves in `cause_direction`, `effect` must move in `effect_direction`."""

    cause: str
    cause_direction: Direction
    effect: str
    effect_direction: Direction

    def __post_init__(self):
        if self.cause == self.effect:
            raise SchemaError("causal rule cannot relate a feature to itself")


@dataclass(frozen=True)
class DimInfo:
    """One dimension of the flat encoded vector fed to the classifier."""

    name: str
    feature: int
    kind: str  # "cont" for continuous-valued dims, "bin" for 0/1 dims
    level: Optional[int] = None


@dataclass(frozen=True)
class DatasetSchema:
    features: tuple[FeatureSpec, ...]
    n_classes: int = 2
    causal_rules: tuple[CausalRule, ...] = ()
    target_name: str = "target"

    def __post_init__(self):
        names = [f.name for f in self.features]
        if len(set(names)) != len(names):
            raise SchemaError("feature names must be unique")
        if self.n_classes < 2:
            raise SchemaError("need at least two target classes")
        index = {f.name: f for f in self.features}
        for rule in self.causal_rules:
            for endpoint, direction in ((rule.cause, rule.cause_direction), (rule.effect, rule.effect_direction)):
                if endpoint not in index:
                    raise SchemaError(f"causal rule references unknown feature {endpoint!r}")
                tag = index[endpoint].kind.tag
                if tag not in ("continuous", "discrete", "ordinal"):
                    raise SchemaError(
                        f"causal rule endpoint {endpoint!r} has kind {tag}, which has no direction"
                    )

    @property
    def n_features(self) -> int:
        return len(self.features)

    def feature_index(self, name: str) -> int:
        for i, f in enumerate(self.features):
            if f.name == name:
                return i
        raise SchemaError(f"unknown feature {name!r}")

    def encoded_layout(self) -> list[DimInfo]:
        """Flat dimension list of the model-space encoding, in feature order."""
        dims: list[DimInfo] = []
        for j, f in enumerate(self.features):
            tag = f.kind.tag
            if tag in ("continuous", "discrete"):
                dims.append(DimInfo(f.name, j, "cont"))
            elif tag == "binary":
                dims.append(DimInfo(f.name, j, "bin", level=1))
            elif tag in ("categorical", "ordinal"):
                for k, level in enumerate(f.kind.levels):
                    dims.append(DimInfo(f"{f.name}={level}", j, "bin", level=k))
            elif tag == "mixed":
                dims.append(DimInfo(f.name, j, "cont"))
                for k, level in enumerate(f.kind.levels):
                    dims.append(DimInfo(f"{f.name}={level}", j, "bin", level=k))
        return dims

    @property
    def n_encoded(self) -> int:
        return len(self.encoded_layout())

    def encoded_fingerprint(self) -> str:
        """Stable digest of the encoded dimension names, to guard against
        silently pairing a classifier with a mismatched schema."""
        import hashlib

        payload = json.dumps([d.name for d in self.encoded_layout()]).encode()
        return hashlib.sha256(payload).hexdigest()[:16]


# ---------------------------------------------------------------------------
# JSON serialization


def _kind_to_json(kind: FeatureKind) -> dict:
    out: dict = {"tag": kind.tag}
    if kind.tag in ("continuous", "discrete", "mixed"):
        out["lb"] = kind.lb
        out["ub"] = kind.ub
    if kind.levels:
        out["levels"] = list(kind.levels)
    return out


def schema_to_json(schema: DatasetSchema) -> dict:
    return {
        "format_version": 1,
        "target": {"n_classes": schema.n_classes, "name": schema.target_name},
        "features": [
            {
                "name": f.name,
                "kind": _kind_to_json(f.kind),
                "mutable": f.mutable,
                "monotone": f.monotone.value,
                "scale": f.scale,
                "shift": f.shift,
                **({"continuous_median": f.continuous_median} if f.continuous_median is not None else {}),
            }
            for f in schema.features
        ],
        "causal_rules": [
            {
                "cause": r.cause,
                "cause_direction": r.cause_direction.value,
                "effect": r.effect,
                "effect_direction": r.effect_direction.value,
            }
            for r in schema.causal_rules
        ],
    }


def schema_from_json(data: dict) -> DatasetSchema:
    try:
        features = []
        for fd in data["features"]:
            kd = fd["kind"]
            kind = FeatureKind(
                kd["tag"],
                lb=float(kd.get("lb", 0.0)),
                ub=float(kd.get("ub", 1.0)),
                levels=tuple(kd.get("levels", ())),
            )
            features.append(
                FeatureSpec(
                    name=fd["name"],
                    kind=kind,
                    mutable=bool(fd.get("mutable", True)),
                    monotone=Monotone(fd.get("monotone", "none")),
                    scale=fd.get("scale"),
                    shift=fd.get("shift"),
                    continuous_median=fd.get("continuous_median"),
                )
            )
        rules = tuple(
            CausalRule(
                cause=rd["cause"],
                cause_direction=Direction(rd["cause_direction"]),
                effect=rd["effect"],
                effect_direction=Direction(rd["effect_direction"]),
            )
            for rd in data.get("causal_rules", ())
        )
        target = data.get("target", {})
        return DatasetSchema(
            features=tuple(features),
            n_classes=int(target.get("n_classes", 2)),
            causal_rules=rules,
            target_name=target.get("name", "target"),
        )
    except (KeyError, TypeError) as exc:
        raise SchemaError(f"malformed schema document: {exc}") from exc


def atomic_write_text(path: str, text: str) -> None:
    """Write via a temp file + rename so interrupted runs never leave a
    truncated artifact behind."""
    directory = os.path.dirname(os.path.abspath(path))
    fd, tmp = tempfile.mkstemp(dir=directory, prefix=".tmp-", suffix=os.path.basename(path))
    try:
        with os.fdopen(fd, "w") as handle:
            handle.write(text)
        os.replace(tmp, path)
    except BaseException:
        if os.path.exists(tmp):
            os.unlink(tmp)
        raise


def save_schema(schema: DatasetSchema, path: str) -> None:
    atomic_write_text(path, json.dumps(schema_to_json(schema), indent=2) + "\n")


def load_schema(path: str) -> DatasetSchema:
    with open(path) as handle:
        return schema_from_json(json.load(handle))
