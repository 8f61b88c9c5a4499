"""Calibration statistics for expert scoring.

Tokens are processed in fixed-size chunks.  Each chunk is reduced in float64
and then folded into exact accumulators: every float64 is an integer multiple
of ``2**-1074``, so the accumulators hold Python integers at that scale and
the reported totals are correctly rounded.  Merging therefore is exactly
commutative and associative, and splitting the input on a chunk boundary
reproduces the single-pass statistics bit for bit.
"""
from __future__ import annotations

import numpy as np

from .errors import ModelFormatError, NumericError, ShapeError, ValidationError
from .io import read_bundle, write_bundle
from .model import MoeLayer, all_expert_outputs, router_probs, topk_indices
from .synthgen import ExpertOutputTable

DEFAULT_CHUNK = 256
_SCALE_BITS = 1074
_FIELDS = ("sel_count", "prob_sum_all", "prob_sum_selected", "act_sq_sum", "gram_sum")


def _to_exact(x: np.ndarray) -> np.ndarray:
    flat = np.asarray(x, dtype=np.float64).ravel()
    out = np.empty(flat.size, dtype=object)
    for i, v in enumerate(flat.tolist()):
        num, den = v.as_integer_ratio()
        out[i] = num << (_SCALE_BITS - den.bit_length() + 1)
    return out.reshape(np.shape(x))


def _to_float(acc: np.ndarray) -> np.ndarray:
    den = 1 << _SCALE_BITS
    flat = [n / den for n in acc.ravel().tolist()]
    return np.array(flat, dtype=np.float64).reshape(acc.shape)


def _chunk_exact(probs: np.ndarray, selected: np.ndarray, outputs: np.ndarray) -> dict[str, np.ndarray]:
    E, n = outputs.shape[:2]
    if probs.shape != (n, E) or selected.shape != (n, E):
        raise ShapeError("probs/selected do not match the expert outputs")
    if not np.all(np.isfinite(outputs)):
        raise NumericError("non-finite expert activations")
    flat = outputs.reshape(E, -1)
    gram = flat @ flat.T
    gram = 0.5 * (gram + gram.T)
    act_sq = np.einsum("ij,ij->i", flat, flat)
    gram[np.diag_indices(E)] = act_sq
    sums = {
        "sel_count": selected.sum(axis=0).astype(np.float64),
        "prob_sum_all": probs.sum(axis=0),
        "prob_sum_selected": np.where(selected, probs, 0.0).sum(axis=0),
        "act_sq_sum": act_sq,
        "gram_sum": gram,
    }
    return {k: _to_exact(v) for k, v in sums.items()}


class CalibStats:
    """Per-layer sufficient statistics.

    ``n`` tokens; ``sel_count[e]`` tokens with ``e`` in the top-k;
    ``prob_sum_all[e]`` sum of routing probabilities; ``prob_sum_selected[e]``
    the same restricted to tokens selecting ``e``; ``act_sq_sum[e]`` sum of
    squared output norms; ``gram_sum[i, j]`` sum of output inner products.
    The float fields are read-only views of the exact accumulators.
    """

    def __init__(self, n: int, exact: dict[str, np.ndarray]):
        self.n = int(n)
        self._exact = exact
        for name in _FIELDS:
            arr = _to_float(exact[name])
            arr.setflags(write=False)
            setattr(self, name, arr)
        self.sel_count = self.sel_count.astype(np.int64)
        self.sel_count.setflags(write=False)

    @property
    def E(self) -> int:
        return self.prob_sum_all.shape[0]

    @classmethod
    def empty(cls, E: int) -> "CalibStats":
        zero = lambda *shape: np.zeros(shape, dtype=object) + 0  # noqa: E731
        return cls(0, {"sel_count": zero(E), "prob_sum_all": zero(E), "prob_sum_selected": zero(E),
                       "act_sq_sum": zero(E), "gram_sum": zero(E, E)})

    @classmethod
    def from_chunk(cls, probs: np.ndarray, selected: np.ndarray, outputs: np.ndarray) -> "CalibStats":
        """Statistics of one chunk.

        ``probs`` and ``selected`` (boolean) have shape ``(n, E)``; ``outputs``
        has shape ``(E, n, d)``.
        """
        return cls(outputs.shape[1], _chunk_exact(probs, selected, outputs))

    def to_tensors(self) -> tuple[dict, dict[str, np.ndarray]]:
        """Header and float tensors; the header keeps the exact numerators as hex."""
        header = {"kind": "calib_stats", "n": self.n, "E": self.E, "scale_bits": _SCALE_BITS,
                  "exact": {k: [hex(v) for v in self._exact[k].ravel().tolist()] for k in _FIELDS}}
        tensors = {k: np.asarray(getattr(self, k), dtype=np.float64) for k in _FIELDS}
        return header, tensors

    @classmethod
    def from_tensors(cls, header: dict, tensors: dict[str, np.ndarray]) -> "CalibStats":
        E = int(header["E"])
        exact = {}
        for k in _FIELDS:
            shape = (E, E) if k == "gram_sum" else (E,)
            if "exact" in header:
                vals = np.array([int(v, 16) for v in header["exact"][k]], dtype=object)
                exact[k] = vals.reshape(shape)
            else:
                exact[k] = _to_exact(tensors[k].reshape(shape))
        return cls(int(header["n"]), exact)

    def __eq__(self, other) -> bool:
        if not isinstance(other, CalibStats):
            return NotImplemented
        return self.n == other.n and all(
            self._exact[k].shape == other._exact[k].shape and bool(np.all(self._exact[k] == other._exact[k]))
            for k in _FIELDS
        )

    def __repr__(self) -> str:
        return f"CalibStats(n={self.n}, E={self.E})"


def merge_stats(a: CalibStats, b: CalibStats) -> CalibStats:
    if a.E != b.E:
        raise ValidationError(f"cannot merge statistics over {a.E} and {b.E} experts")
    return CalibStats(a.n + b.n, {k: a._exact[k] + b._exact[k] for k in _FIELDS})


def _selection_mask(probs: np.ndarray, k: int) -> np.ndarray:
    mask = np.zeros(probs.shape, dtype=bool)
    np.put_along_axis(mask, topk_indices(probs, k), True, axis=-1)
    return mask


def collect(layer: MoeLayer, inputs, chunk_size: int = DEFAULT_CHUNK) -> CalibStats:
    """Dense calibration pass: every expert is evaluated on every token."""
    inputs = np.asarray(inputs, dtype=np.float64)
    if inputs.ndim != 2 or inputs.shape[0] == 0:
        raise ValidationError("calibration needs a non-empty (n, d) input array")
    if inputs.shape[1] != layer.d:
        raise ShapeError(f"inputs have width {inputs.shape[1]}, layer expects {layer.d}")
    acc = CalibStats.empty(layer.E)._exact
    for start in range(0, inputs.shape[0], chunk_size):
        h = inputs[start:start + chunk_size]
        probs = router_probs(layer, h)
        chunk = _chunk_exact(probs, _selection_mask(probs, layer.k), all_expert_outputs(layer, h))
        acc = {k: acc[k] + chunk[k] for k in _FIELDS}
    return CalibStats(inputs.shape[0], acc)


def collect_table(table: ExpertOutputTable, points=None, k: int = 1,
                  chunk_size: int = DEFAULT_CHUNK) -> CalibStats:
    """Statistics of a deterministic-router table.

    With ``points=None`` each point is visited once, which gives the exact
    population moments.  Otherwise ``points`` lists sampled point indices.
    """
    idx = np.arange(table.n_points) if points is None else np.asarray(points, dtype=np.int64)
    if idx.size == 0:
        raise ValidationError("calibration needs at least one point")
    probs_all = table.probs()
    acc = CalibStats.empty(table.E)._exact
    for start in range(0, idx.size, chunk_size):
        sel = idx[start:start + chunk_size]
        probs = probs_all[sel]
        chunk = _chunk_exact(probs, _selection_mask(probs, k), table.outputs[:, sel][:, :, None])
        acc = {key: acc[key] + chunk[key] for key in _FIELDS}
    return CalibStats(idx.size, acc)


def save_stats(stats: CalibStats, path, extra: dict | None = None):
    header, tensors = stats.to_tensors()
    if extra:
        header["extra"] = extra
    return write_bundle(path, header, tensors)


def load_stats(path) -> CalibStats:
    header, tensors = read_bundle(path)
    if header.get("kind") != "calib_stats":
        raise ModelFormatError(f"{path}: not a calibration statistics bundle")
    return CalibStats.from_tensors(header, tensors)
