"""Feed-forward ReLU classifier: exact forward pass and activation bounds.

Networks are ingested, never trained here. The weight file records a
fingerprint of the encoded feature ordering so a classifier cannot be
silently paired with a schema it was not built for.
"""

from __future__ import annotations

import json
import warnings
from dataclasses import dataclass
from typing import Optional, Sequence

import numpy as np

from .schema import atomic_write_text

NN_FORMAT_VERSION = 1


class NnError(ValueError):
    pass


@dataclass(frozen=True)
class Mlp:
    """Affine layers with rectifier activations between them; the final
    layer emits raw scores (1 for binary, C for multiclass)."""

    layers: tuple[tuple[np.ndarray, np.ndarray], ...]
    n_classes: int = 2
    fingerprint: Optional[str] = None

    def __post_init__(self):
        prev_out = None
        for li, (w, b) in enumerate(self.layers):
            if w.ndim != 2 or b.ndim != 1 or w.shape[0] != b.shape[0]:
                raise NnError(f"layer {li}: weight/bias shapes {w.shape}/{b.shape} do not chain")
            if prev_out is not None and w.shape[1] != prev_out:
                raise NnError(f"layer {li}: expected input width {prev_out}, got {w.shape[1]}")
            if not (np.all(np.isfinite(w)) and np.all(np.isfinite(b))):
                raise NnError(f"layer {li}: weights must be finite")
            prev_out = w.shape[0]
        expected_out = 1 if self.n_classes == 2 else self.n_classes
        if prev_out != expected_out:
            raise NnError(
                f"output width {prev_out} does not match {self.n_classes} classes"
            )

    @property
    def n_inputs(self) -> int:
        return self.layers[0][0].shape[1]

    @property
    def n_outputs(self) -> int:
        return self.layers[-1][0].shape[0]


def forward_raw(mlp: Mlp, x: Sequence[float]) -> np.ndarray:
    """Raw output scores (no activation on the final layer)."""
    h = np.asarray(x, dtype=float)
    if h.shape[-1] != mlp.n_inputs:
        raise NnError(f"input width {h.shape[-1]}, network expects {mlp.n_inputs}")
    for i, (w, b) in enumerate(mlp.layers):
        h = h @ w.T + b
        if i < len(mlp.layers) - 1:
            h = np.maximum(h, 0.0)
    return h


def classify(mlp: Mlp, x: Sequence[float]) -> int:
    """Binary networks classify on the sign of the single raw score,
    multiclass on the argmax."""
    raw = forward_raw(mlp, x)
    if mlp.n_classes == 2 and mlp.n_outputs == 1:
        return int(raw[0] >= 0.0)
    return int(np.argmax(raw))


@dataclass(frozen=True)
class ActivationBounds:
    """Sound pre-activation interval per hidden unit, per hidden layer."""

    lower: tuple[np.ndarray, ...]
    upper: tuple[np.ndarray, ...]


def interval_bounds(
    mlp: Mlp,
    input_lower: Optional[np.ndarray] = None,
    input_upper: Optional[np.ndarray] = None,
) -> ActivationBounds:
    """Interval-arithmetic propagation of the input box (default [0, 1]^P).

    The returned intervals contain every reachable pre-activation, so they
    are safe big-M constants for the ReLU encoding.
    """
    lo = np.zeros(mlp.n_inputs) if input_lower is None else np.asarray(input_lower, dtype=float)
    hi = np.ones(mlp.n_inputs) if input_upper is None else np.asarray(input_upper, dtype=float)
    if np.any(lo > hi):
        raise NnError("input box has lower > upper")
    lowers, uppers = [], []
    for i, (w, b) in enumerate(mlp.layers):
        w_pos = np.maximum(w, 0.0)
        w_neg = np.minimum(w, 0.0)
        pre_lo = w_pos @ lo + w_neg @ hi + b
        pre_hi = w_pos @ hi + w_neg @ lo + b
        lowers.append(pre_lo)
        uppers.append(pre_hi)
        if i < len(mlp.layers) - 1:
            lo = np.maximum(pre_lo, 0.0)
            hi = np.maximum(pre_hi, 0.0)
    return ActivationBounds(lower=tuple(lowers), upper=tuple(uppers))


# ---------------------------------------------------------------------------
# weight files


def mlp_to_json(mlp: Mlp) -> dict:
    return {
        "format_version": NN_FORMAT_VERSION,
        "activation": "relu",
        "n_classes": mlp.n_classes,
        "fingerprint": mlp.fingerprint,
        "layers": [
            {"weight": w.tolist(), "bias": b.tolist()} for w, b in mlp.layers
        ],
    }


def mlp_from_json(data: dict, expected_fingerprint: Optional[str] = None) -> Mlp:
    try:
        if data.get("activation", "relu") != "relu":
            raise NnError(f"unsupported activation {data.get('activation')!r}")
        layers = tuple(
            (np.asarray(ld["weight"], dtype=float), np.asarray(ld["bias"], dtype=float))
            for ld in data["layers"]
        )
        mlp = Mlp(
            layers=layers,
            n_classes=int(data.get("n_classes", 2)),
            fingerprint=data.get("fingerprint"),
        )
    except (KeyError, TypeError, ValueError) as exc:
        if isinstance(exc, NnError):
            raise
        raise NnError(f"malformed network document: {exc}") from exc
    if expected_fingerprint is not None:
        if mlp.fingerprint is None:
            warnings.warn("network file carries no schema fingerprint; accepting as-is")
        elif mlp.fingerprint != expected_fingerprint:
            raise NnError(
                f"network fingerprint {mlp.fingerprint} does not match schema "
                f"fingerprint {expected_fingerprint}"
            )
    return mlp


def save_mlp(mlp: Mlp, path: str) -> None:
    atomic_write_text(path, json.dumps(mlp_to_json(mlp)) + "\n")


def load_mlp(path: str, expected_fingerprint: Optional[str] = None) -> Mlp:
    with open(path) as handle:
        return mlp_from_json(json.load(handle), expected_fingerprint)
