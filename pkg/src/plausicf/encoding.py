"""Bidirectional mapping between raw tabular rows and model space.

Three representations are used throughout the package:

raw row        list of cell values exactly as they appear in a CSV row:
               numbers for continuous/discrete/binary columns, level labels
               for categorical/ordinal columns, either for mixed columns.

normalized row ``float`` per feature. Continuous-valued features live in
               [0, 1]; binary/categorical/ordinal features store the level
               index; a mixed feature stores its continuous value in [0, 1]
               or ``-(k + 1)`` when it takes its k-th categorical level
               (negative codes keep the two branches unambiguous).

encoded vector the flat vector fed to the classifier and the optimizer:
               one dimension per continuous value, one 0/1 dimension per
               one-hot level (see DatasetSchema.encoded_layout).
"""

from __future__ import annotations

import warnings
from dataclasses import dataclass
from typing import Optional, Sequence

import numpy as np

from .schema import DatasetSchema, FeatureSpec, SchemaError

BINARY_TOL = 1e-6


class EncodingError(SchemaError):
    pass


# ---------------------------------------------------------------------------
# raw <-> normalized


def _normalize_value(spec: FeatureSpec, value, clip: bool) -> float:
    tag = spec.kind.tag
    if tag in ("categorical", "ordinal"):
        try:
            return float(spec.kind.levels.index(str(value)))
        except ValueError:
            raise EncodingError(f"feature {spec.name!r}: unknown level {value!r}") from None
    if tag == "binary":
        v = float(value)
        if v not in (0.0, 1.0):
            raise EncodingError(f"feature {spec.name!r}: binary value must be 0 or 1, got {value!r}")
        return v
    if tag == "mixed" and isinstance(value, str) and value in spec.kind.levels:
        return -(spec.kind.levels.index(value) + 1.0)
    # continuous branch (continuous / discrete / mixed-with-number)
    try:
        v = float(value)
    except (TypeError, ValueError):
        raise EncodingError(f"feature {spec.name!r}: expected a number, got {value!r}") from None
    if tag == "mixed" and isinstance(value, str):
        raise EncodingError(f"feature {spec.name!r}: unknown level {value!r}")
    if tag == "discrete" and v != round(v):
        raise EncodingError(f"feature {spec.name!r}: expected an integer, got {value!r}")
    normalized = spec.to_normalized(v)
    if not 0.0 <= normalized <= 1.0:
        if -1e-9 <= normalized <= 1.0 + 1e-9:
            # round-trip arithmetic noise at the bounds
            return min(max(normalized, 0.0), 1.0)
        if not clip:
            raise EncodingError(
                f"feature {spec.name!r}: value {value!r} outside bounds "
                f"[{spec.kind.lb}, {spec.kind.ub}]"
            )
        warnings.warn(
            f"feature {spec.name!r}: value {value!r} outside training bounds, clipping",
            stacklevel=3,
        )
        normalized = min(max(normalized, 0.0), 1.0)
    return normalized


def normalize(row: Sequence, schema: DatasetSchema, clip: bool = False) -> np.ndarray:
    """Map a raw row into normalized per-feature values.

    Out-of-bounds continuous values raise unless ``clip`` is set, in which
    case they are clipped to [0, 1] with a warning (intended for test-split
    rows that exceed the training range).
    """
    if len(row) != schema.n_features:
        raise EncodingError(f"expected {schema.n_features} values, got {len(row)}")
    return np.array(
        [_normalize_value(spec, value, clip) for spec, value in zip(schema.features, row)],
        dtype=float,
    )


def denormalize(norm_row: np.ndarray, schema: DatasetSchema) -> list:
    """Inverse of normalize; discrete values land exactly on integers."""
    out = []
    for spec, v in zip(schema.features, norm_row):
        tag = spec.kind.tag
        if tag in ("categorical", "ordinal"):
            out.append(spec.kind.levels[int(round(v))])
        elif tag == "binary":
            out.append(int(round(v)))
        elif tag == "mixed" and v < 0:
            out.append(spec.kind.levels[int(round(-v)) - 1])
        else:
            raw = spec.to_raw(float(v))
            out.append(int(round(raw)) if tag == "discrete" else raw)
    return out


def normalize_dataset(rows: Sequence[Sequence], schema: DatasetSchema, clip: bool = False) -> np.ndarray:
    if not len(rows):
        raise EncodingError("empty dataset")
    return np.vstack([normalize(r, schema, clip=clip) for r in rows])


# ---------------------------------------------------------------------------
# normalized -> encoded vector


def encoded_from_normalized(norm_row: np.ndarray, schema: DatasetSchema) -> np.ndarray:
    vec: list[float] = []
    for spec, v in zip(schema.features, norm_row):
        tag = spec.kind.tag
        if tag in ("continuous", "discrete"):
            vec.append(float(v))
        elif tag == "binary":
            vec.append(float(v))
        elif tag in ("categorical", "ordinal"):
            onehot = [0.0] * spec.kind.n_levels
            onehot[int(round(v))] = 1.0
            vec.extend(onehot)
        else:  # mixed: continuous slot is 0 when a categorical level is taken
            onehot = [0.0] * len(spec.kind.levels)
            if v < 0:
                onehot[int(round(-v)) - 1] = 1.0
                vec.append(0.0)
            else:
                vec.append(float(v))
            vec.extend(onehot)
    return np.array(vec, dtype=float)


def encode_dataset(rows: Sequence[Sequence], schema: DatasetSchema, clip: bool = False) -> np.ndarray:
    norm = normalize_dataset(rows, schema, clip=clip)
    return np.vstack([encoded_from_normalized(r, schema) for r in norm])


def normalized_from_encoded(vec: np.ndarray, schema: DatasetSchema) -> np.ndarray:
    """Normalized row for an encoded vector (e.g. a solver assignment),
    absorbing sub-tolerance solver noise: continuous slots are clipped into
    [0, 1] and one-hot groups resolved by argmax."""
    out = []
    pos = 0
    for spec in schema.features:
        tag = spec.kind.tag
        if tag in ("continuous", "discrete"):
            out.append(min(max(float(vec[pos]), 0.0), 1.0))
            pos += 1
        elif tag == "binary":
            out.append(float(round(float(vec[pos]))))
            pos += 1
        elif tag in ("categorical", "ordinal"):
            k = spec.kind.n_levels
            out.append(float(np.argmax(vec[pos : pos + k])))
            pos += k
        else:  # mixed
            c = min(max(float(vec[pos]), 0.0), 1.0)
            k = len(spec.kind.levels)
            onehot = np.asarray(vec[pos + 1 : pos + 1 + k], dtype=float)
            if onehot.sum() > 0.5:
                out.append(-(float(np.argmax(onehot)) + 1.0))
            else:
                out.append(c)
            pos += 1 + k
    return np.array(out, dtype=float)


def decode_vector(vec: np.ndarray, schema: DatasetSchema) -> list:
    """Map an encoded vector (e.g. a solver assignment) back to a raw row.

    One-hot groups must sum to 1 within BINARY_TOL before rounding; the
    winning level is the argmax.
    """
    out = []
    pos = 0
    for spec in schema.features:
        tag = spec.kind.tag
        if tag in ("continuous", "discrete"):
            raw = spec.to_raw(float(vec[pos]))
            out.append(int(round(raw)) if tag == "discrete" else raw)
            pos += 1
        elif tag == "binary":
            b = float(vec[pos])
            if not (abs(b) <= 0.5 + BINARY_TOL or abs(b - 1.0) <= 0.5 + BINARY_TOL):
                raise EncodingError(f"feature {spec.name!r}: binary value {b} out of range")
            out.append(int(round(b)))
            pos += 1
        elif tag in ("categorical", "ordinal"):
            k = spec.kind.n_levels
            onehot = np.asarray(vec[pos : pos + k], dtype=float)
            if abs(onehot.sum() - 1.0) > 1e-3:
                raise EncodingError(
                    f"feature {spec.name!r}: one-hot sums to {onehot.sum():.6f}, expected 1"
                )
            out.append(spec.kind.levels[int(np.argmax(onehot))])
            pos += k
        else:  # mixed
            c = float(vec[pos])
            k = len(spec.kind.levels)
            onehot = np.asarray(vec[pos + 1 : pos + 1 + k], dtype=float)
            if onehot.sum() > 0.5:
                out.append(spec.kind.levels[int(np.argmax(onehot))])
            else:
                out.append(spec.to_raw(c))
            pos += 1 + k
    return out


# ---------------------------------------------------------------------------
# the anchored (l, u, c, d) image of a row


@dataclass(frozen=True)
class FeatureImage:
    """Variable image of one feature under the two-sided change encoding."""

    anchor: Optional[float]  # F: anchor for the continuous branch, in [0, 1]
    decrease: Optional[float]  # l >= 0
    increase: Optional[float]  # u >= 0
    continuous_value: Optional[float]  # c = F*d_cont - l + u
    onehot: Optional[np.ndarray]  # d_{j,k}
    continuous_indicator: Optional[float]  # d_cont (mixed features only)


@dataclass(frozen=True)
class EncodedPoint:
    features: tuple[FeatureImage, ...]


def encode(norm_row: np.ndarray, schema: DatasetSchema) -> EncodedPoint:
    """Anchor the change encoding at a normalized row: l = u = 0 everywhere,
    indicators matching the row, and the mixed-feature anchor falling back to
    the schema's continuous median when the factual holds a level."""
    images = []
    for spec, v in zip(schema.features, norm_row):
        tag = spec.kind.tag
        if tag in ("continuous", "discrete"):
            images.append(FeatureImage(float(v), 0.0, 0.0, float(v), None, None))
        elif tag in ("binary", "categorical", "ordinal"):
            onehot = np.zeros(spec.kind.n_levels)
            onehot[int(round(v))] = 1.0
            images.append(FeatureImage(None, None, None, None, onehot, None))
        else:  # mixed
            onehot = np.zeros(len(spec.kind.levels))
            if v < 0:
                onehot[int(round(-v)) - 1] = 1.0
                anchor = spec.continuous_median
                if anchor is None:
                    raise EncodingError(
                        f"feature {spec.name!r}: mixed feature needs a continuous_median "
                        "anchor when the factual takes a categorical level"
                    )
                images.append(FeatureImage(float(anchor), 0.0, 0.0, 0.0, onehot, 0.0))
            else:
                images.append(FeatureImage(float(v), 0.0, 0.0, float(v), onehot, 1.0))
    return EncodedPoint(tuple(images))


def decode_point(point: EncodedPoint, schema: DatasetSchema) -> list:
    """Raw row for an (l, u, c, d) assignment, validating one-hot sums."""
    norm = []
    for spec, img in zip(schema.features, point.features):
        tag = spec.kind.tag
        if tag in ("continuous", "discrete"):
            norm.append(img.continuous_value)
        elif tag in ("binary", "categorical", "ordinal"):
            total = float(np.sum(img.onehot))
            if abs(total - 1.0) > 1e-3:
                raise EncodingError(f"feature {spec.name!r}: one-hot sums to {total:.6f}")
            norm.append(float(np.argmax(img.onehot)))
        else:
            total = float(np.sum(img.onehot)) + float(img.continuous_indicator)
            if abs(total - 1.0) > 1e-3:
                raise EncodingError(f"feature {spec.name!r}: selector sums to {total:.6f}")
            if img.continuous_indicator > 0.5:
                norm.append(img.continuous_value)
            else:
                norm.append(-(float(np.argmax(img.onehot)) + 1.0))
    return denormalize(np.array(norm), schema)


# ---------------------------------------------------------------------------
# MAD weights


@dataclass(frozen=True)
class MadWeights:
    """Inverse-MAD weight per encoded dimension, split by dimension kind."""

    per_dim: np.ndarray
    cont_mask: np.ndarray  # True where the dimension is continuous-valued

    @property
    def v_cont(self) -> np.ndarray:
        return self.per_dim[self.cont_mask]

    @property
    def v_bin(self) -> np.ndarray:
        return self.per_dim[~self.cont_mask]


def mad_weights(encoded_rows: np.ndarray, schema: DatasetSchema) -> MadWeights:
    """Inverse median-absolute-deviation weight per encoded dimension.

    A dimension with MAD 0 (constant columns, rare one-hot levels,
    single-row datasets) falls back to weight 1.0 so it stays penalized at
    unit scale instead of blowing up the objective.
    """
    encoded_rows = np.asarray(encoded_rows, dtype=float)
    if encoded_rows.ndim != 2 or encoded_rows.shape[0] == 0:
        raise EncodingError("mad_weights requires a non-empty 2-D dataset")
    layout = schema.encoded_layout()
    if encoded_rows.shape[1] != len(layout):
        raise EncodingError(
            f"expected {len(layout)} encoded dimensions, got {encoded_rows.shape[1]}"
        )
    med = np.median(encoded_rows, axis=0)
    mad = np.median(np.abs(encoded_rows - med), axis=0)
    weights = np.where(mad > 0, 1.0 / np.where(mad > 0, mad, 1.0), 1.0)
    cont_mask = np.array([d.kind == "cont" for d in layout])
    return MadWeights(per_dim=weights, cont_mask=cont_mask)


def mad_distance(vec_a: np.ndarray, vec_b: np.ndarray, weights: MadWeights) -> float:
    """Weighted L1 distance between two encoded vectors."""
    return float(np.abs(np.asarray(vec_a) - np.asarray(vec_b)) @ weights.per_dim)


# ---------------------------------------------------------------------------
# sklearn-style wrapper


try:
    from sklearn.base import BaseEstimator, TransformerMixin
except ImportError:  # pragma: no cover - sklearn is a hard dependency
    BaseEstimator = object
    TransformerMixin = object


class TabularEncoder(BaseEstimator, TransformerMixin):
    """Schema-driven encoder with the fit/transform/inverse_transform surface.

    ``fit`` learns the MAD weights from the training rows; ``transform``
    maps raw rows to encoded vectors and ``inverse_transform`` maps encoded
    vectors (or solver assignments) back to raw rows.
    """

    def __init__(self, schema: DatasetSchema, clip: bool = False):
        self.schema = schema
        self.clip = clip

    def fit(self, X: Sequence[Sequence], y=None) -> "TabularEncoder":
        encoded = encode_dataset(X, self.schema, clip=self.clip)
        self.mad_weights_ = mad_weights(encoded, self.schema)
        self.n_rows_ = encoded.shape[0]
        return self

    def transform(self, X: Sequence[Sequence]) -> np.ndarray:
        return encode_dataset(X, self.schema, clip=self.clip)

    def inverse_transform(self, X: np.ndarray) -> list[list]:
        X = np.atleast_2d(np.asarray(X, dtype=float))
        return [decode_vector(row, self.schema) for row in X]
