"""Mask-mutation algorithms: weight growth/pruning and structured
row/column growth/pruning, plus the coordinated multi-gate wrappers and
the ratio-halving schedule.

Selection counts use ceil(ratio * n) with ties broken by lower index, so
every decision is deterministic and checkable against a full-sort oracle.
Grown weights are initialized to lr * gradient (sign-carrying), for both
single-weight and row/column growth.
"""

from __future__ import annotations

import json
import math
from dataclasses import dataclass, replace
from enum import Enum
from pathlib import Path

import numpy as np

from .hlstm import GATES, HLSTMCellParams
from .numkit import ContractViolation, MaskedLinear


class DegenerateLayerError(ValueError):
    """A prune request would remove every row or every column of a layer."""


@dataclass(frozen=True)
class GrowPruneConfig:
    g_w: float = 0.1              # weight growth ratio per application
    p_w: float = 0.7              # initial weight pruning ratio
    p_r: float = 0.2              # row pruning ratio
    p_c: float = 0.2              # column pruning ratio
    g_r: float = 0.0              # row growth ratio (derived from LHP gap)
    g_c: float = 0.0
    accuracy_threshold: float = math.inf   # perplexity upper bound
    halving_floor: float = 0.01   # below this, switch to single-row/column mode
    retrain_patience: int = 2     # retrain epochs per prune iteration

    def __post_init__(self):
        for name in ("g_w", "p_w", "p_r", "p_c", "g_r", "g_c"):
            v = getattr(self, name)
            if not 0.0 <= v <= 1.0:
                raise ContractViolation(f"ratio {name}={v} outside [0, 1]")
        if not self.accuracy_threshold > 0:
            raise ContractViolation("accuracy threshold must be positive")


@dataclass
class ActiveSets:
    """Indices of rows/columns of a layer that still carry any connection."""

    set_r: np.ndarray
    set_c: np.ndarray

    @classmethod
    def of(cls, layer: MaskedLinear) -> "ActiveSets":
        return cls(set_r=layer.active_rows(), set_c=layer.active_cols())


def _ceil_count(ratio: float, n: int) -> int:
    return int(math.ceil(ratio * n))


def _top_k_stable(scores: np.ndarray, k: int) -> np.ndarray:
    """Indices of the k largest scores; ties favor the lower index."""
    if k <= 0:
        return np.empty(0, dtype=np.int64)
    order = np.argsort(-scores, kind="stable")
    return np.sort(order[:k])


def _bottom_k_stable(scores: np.ndarray, k: int) -> np.ndarray:
    if k <= 0:
        return np.empty(0, dtype=np.int64)
    order = np.argsort(scores, kind="stable")
    return np.sort(order[:k])


def weight_grow(layer: MaskedLinear, grad: np.ndarray, g_w: float, lr: float) -> int:
    """Activate the most effective dormant connections by |gradient|.

    Activates the top ceil(g_w * total_entries) dormant entries ranked by
    |grad|; fewer if not enough entries are dormant. New weights start at
    lr * grad. Returns the number of activations.
    """
    if not 0.0 <= g_w <= 1.0:
        raise ContractViolation(f"growth ratio {g_w} outside [0, 1]")
    grad = np.asarray(grad)
    if grad.shape != layer.w.shape:
        raise ContractViolation(
            f"{layer.name}: gradient shape {grad.shape} != {layer.w.shape}")
    dormant = np.flatnonzero(layer.mask.ravel() == 0.0)
    k = min(_ceil_count(g_w, layer.w.size), dormant.size)
    if k == 0:
        return 0
    scores = np.abs(grad.ravel()[dormant])
    chosen = dormant[_top_k_stable(scores, k)]
    flat_m = layer.mask.ravel()
    flat_w = layer.w.ravel()
    flat_m[chosen] = 1.0
    flat_w[chosen] = lr * grad.ravel()[chosen]
    return k


def weight_prune(layer: MaskedLinear, p_w: float) -> int:
    """Deactivate the ceil(p_w * active) smallest-|W| active connections."""
    if not 0.0 <= p_w <= 1.0:
        raise ContractViolation(f"pruning ratio {p_w} outside [0, 1]")
    active = np.flatnonzero(layer.mask.ravel() == 1.0)
    k = min(_ceil_count(p_w, active.size), active.size)
    if k == 0:
        return 0
    scores = np.abs(layer.w.ravel()[active])
    chosen = active[_bottom_k_stable(scores, k)]
    flat_m = layer.mask.ravel()
    flat_w = layer.w.ravel()
    flat_m[chosen] = 0.0
    flat_w[chosen] = 0.0
    return k


def neuron_sweep(layers: list[MaskedLinear]) -> list[tuple[str, str, int]]:
    """Report (layer, axis, index) of rows/columns whose mask is all-zero."""
    dead = []
    for layer in layers:
        for r in np.flatnonzero(~layer.mask.any(axis=1)):
            dead.append((layer.name, "row", int(r)))
        for c in np.flatnonzero(~layer.mask.any(axis=0)):
            dead.append((layer.name, "col", int(c)))
    return dead


def rc_prune(layer: MaskedLinear, p_r: float, p_c: float) -> tuple[int, int]:
    """Prune the least important active rows and columns by |W| sums.

    Row importance is sum(|W|) over the row, column importance over the
    column, both before any pruning in this call. Counts are
    ceil(ratio * active_count); refusing requests that would zero the whole
    layer.
    """
    if not 0.0 <= p_r <= 1.0 or not 0.0 <= p_c <= 1.0:
        raise ContractViolation("row/column pruning ratios must be in [0, 1]")
    active = ActiveSets.of(layer)
    k_r = min(_ceil_count(p_r, active.set_r.size), active.set_r.size)
    k_c = min(_ceil_count(p_c, active.set_c.size), active.set_c.size)
    return rc_prune_counts(layer, k_r, k_c)


def rc_prune_counts(layer: MaskedLinear, k_r: int, k_c: int) -> tuple[int, int]:
    active = ActiveSets.of(layer)
    if k_r >= active.set_r.size and k_r > 0:
        raise DegenerateLayerError(f"{layer.name}: pruning all {active.set_r.size} rows")
    if k_c >= active.set_c.size and k_c > 0:
        raise DegenerateLayerError(f"{layer.name}: pruning all {active.set_c.size} cols")
    eff = np.abs(layer.effective())
    row_scores = eff[active.set_r, :].sum(axis=1)
    col_scores = eff[:, active.set_c].sum(axis=0)
    rows = active.set_r[_bottom_k_stable(row_scores, k_r)]
    cols = active.set_c[_bottom_k_stable(col_scores, k_c)]
    layer.mask[rows, :] = 0.0
    layer.w[rows, :] = 0.0
    layer.b[rows] = 0.0
    layer.mask[:, cols] = 0.0
    layer.w[:, cols] = 0.0
    return len(rows), len(cols)


def rc_grow(layer: MaskedLinear, grad: np.ndarray, active: ActiveSets,
            g_r: float, g_c: float, lr: float) -> tuple[int, int]:
    """Activate the dormant rows/columns with the largest |gradient| sums.

    Gradient entries in the fully active region are ignored. Grown rows are
    activated across the existing active columns (and vice versa), with
    weights lr * grad; requested growth beyond the available dormant
    rows/columns grows all that remain.
    """
    if not 0.0 <= g_r <= 1.0 or not 0.0 <= g_c <= 1.0:
        raise ContractViolation("row/column growth ratios must be in [0, 1]")
    m, n = layer.w.shape
    k_r = _ceil_count(g_r, m)
    k_c = _ceil_count(g_c, n)
    return rc_grow_counts(layer, grad, active, k_r, k_c, lr)


def rc_grow_counts(layer: MaskedLinear, grad: np.ndarray, active: ActiveSets,
                   k_r: int, k_c: int, lr: float) -> tuple[int, int]:
    grad = np.asarray(grad)
    if grad.shape != layer.w.shape:
        raise ContractViolation(
            f"{layer.name}: gradient shape {grad.shape} != {layer.w.shape}")
    m, n = layer.w.shape
    dormant_r = np.setdiff1d(np.arange(m), active.set_r)
    dormant_c = np.setdiff1d(np.arange(n), active.set_c)
    k_r = min(k_r, dormant_r.size)
    k_c = min(k_c, dormant_c.size)
    agrad = np.abs(grad)
    rows = dormant_r[_top_k_stable(agrad[dormant_r][:, active.set_c].sum(axis=1), k_r)] \
        if active.set_c.size else dormant_r[:k_r]
    cols = dormant_c[_top_k_stable(agrad[active.set_r][:, dormant_c].sum(axis=0), k_c)] \
        if active.set_r.size else dormant_c[:k_c]
    for r in rows:
        layer.mask[r, active.set_c] = 1.0
        layer.w[r, active.set_c] = lr * grad[r, active.set_c]
    for c in cols:
        layer.mask[active.set_r, c] = 1.0
        layer.w[active.set_r, c] = lr * grad[active.set_r, c]
    return len(rows), len(cols)


# --- coordinated multi-gate structured operations ---------------------------

def _unit_arrays(cell: HLSTMCellParams):
    """Active flags per structural index class, read off the gate masks."""
    s_active = np.zeros(cell.d_s, dtype=bool)
    h_active = np.zeros(cell.d_h, dtype=bool) if cell.hidden_depth else None
    for gate in GATES:
        s_active |= cell.o_layers[gate].mask.any(axis=1)
        if cell.hidden_depth:
            h_active |= cell.h_layers[gate].mask.any(axis=1)
    return s_active, h_active


def unit_importance(cell: HLSTMCellParams, head: MaskedLinear | None = None,
                    grads: dict[int, np.ndarray] | None = None):
    """Summed row/column importances per d_s and d_h structural unit.

    With grads=None importance is sum(|W|) (pruning); otherwise it is
    sum(|G|) restricted to the active complement (growth). grads maps
    id(layer) -> gradient matrix.
    """
    def mat(layer):
        if grads is None:
            return np.abs(layer.effective())
        return np.abs(np.asarray(grads[id(layer)]))

    s_imp = np.zeros(cell.d_s)
    h_imp = np.zeros(cell.d_h) if cell.hidden_depth else None
    for gate in GATES:
        o_layer = cell.o_layers[gate]
        o_cols = o_layer.active_cols()
        o_rows = o_layer.active_rows()
        om = mat(o_layer)
        if grads is None:
            s_imp += om.sum(axis=1)
        else:
            s_imp += om[:, o_cols].sum(axis=1) if o_cols.size else 0.0
        if cell.hidden_depth:
            h_layer = cell.h_layers[gate]
            hm = mat(h_layer)
            h_rows = h_layer.active_rows()
            h_cols = h_layer.active_cols()
            if grads is None:
                h_imp += hm.sum(axis=1) + om.sum(axis=0)[:cell.d_h]
                s_imp += hm[:, cell.d_x:].sum(axis=0)
            else:
                h_imp += (hm[:, h_cols].sum(axis=1) if h_cols.size else 0.0)
                h_imp += (om[o_rows, :].sum(axis=0) if o_rows.size else 0.0)
                s_imp += (hm[h_rows, cell.d_x:].sum(axis=0) if h_rows.size else 0.0)
    if head is not None:
        hd = mat(head)
        if grads is None:
            s_imp += hd.sum(axis=0)
        else:
            s_imp += hd[head.active_rows(), :].sum(axis=0)
    return s_imp, h_imp


def _apply_unit_prune(cell: HLSTMCellParams, head: MaskedLinear | None,
                      s_idx: np.ndarray, h_idx: np.ndarray) -> None:
    for gate in GATES:
        o_layer = cell.o_layers[gate]
        o_layer.mask[s_idx, :] = 0.0
        o_layer.w[s_idx, :] = 0.0
        o_layer.b[s_idx] = 0.0
        if cell.hidden_depth:
            h_layer = cell.h_layers[gate]
            h_layer.mask[:, cell.d_x + s_idx] = 0.0
            h_layer.w[:, cell.d_x + s_idx] = 0.0
            h_layer.mask[h_idx, :] = 0.0
            h_layer.w[h_idx, :] = 0.0
            h_layer.b[h_idx] = 0.0
            o_layer.mask[:, h_idx] = 0.0
            o_layer.w[:, h_idx] = 0.0
        else:
            o_layer.mask[:, cell.d_x + s_idx] = 0.0
            o_layer.w[:, cell.d_x + s_idx] = 0.0
    if head is not None:
        head.mask[:, s_idx] = 0.0
        head.w[:, s_idx] = 0.0


def coordinated_rc_prune(cell: HLSTMCellParams, head: MaskedLinear | None,
                         p_r: float, p_c: float) -> tuple[int, int]:
    """Prune d_s units (ratio p_r) and d_h units (ratio p_c) across all
    gates at once, keeping the four gates dimensionally identical.

    Returns the new active (d_s, d_h).
    """
    s_active, h_active = _unit_arrays(cell)
    k_s = min(_ceil_count(p_r, int(s_active.sum())), int(s_active.sum()))
    k_h = min(_ceil_count(p_c, int(h_active.sum())), int(h_active.sum())) \
        if cell.hidden_depth else 0
    return coordinated_rc_prune_counts(cell, head, k_s, k_h)


def coordinated_rc_prune_counts(cell: HLSTMCellParams, head: MaskedLinear | None,
                                k_s: int, k_h: int) -> tuple[int, int]:
    s_active, h_active = _unit_arrays(cell)
    n_s = int(s_active.sum())
    n_h = int(h_active.sum()) if cell.hidden_depth else 0
    if k_s >= n_s and k_s > 0:
        raise DegenerateLayerError(f"pruning all {n_s} hidden-state units")
    if cell.hidden_depth and k_h >= n_h and k_h > 0:
        raise DegenerateLayerError(f"pruning all {n_h} gate hidden units")
    s_imp, h_imp = unit_importance(cell, head)
    s_cand = np.flatnonzero(s_active)
    s_idx = s_cand[_bottom_k_stable(s_imp[s_cand], k_s)]
    if cell.hidden_depth:
        h_cand = np.flatnonzero(h_active)
        h_idx = h_cand[_bottom_k_stable(h_imp[h_cand], k_h)]
    else:
        h_idx = np.empty(0, dtype=np.int64)
    _apply_unit_prune(cell, head, s_idx, h_idx)
    return cell.active_dims()


def coordinated_rc_grow_counts(cell: HLSTMCellParams, head: MaskedLinear | None,
                               grads: dict[int, np.ndarray], k_s: int, k_h: int,
                               lr: float) -> tuple[int, int]:
    """Reactivate the dormant d_s/d_h units with the largest |G| sums.

    Growth touches only the cross-connections into currently active units
    (never the previously fully active region); new weights are lr * G.
    """
    s_active, h_active = _unit_arrays(cell)
    s_imp, h_imp = unit_importance(cell, head, grads=grads)
    s_dormant = np.flatnonzero(~s_active)
    s_idx = s_dormant[_top_k_stable(s_imp[s_dormant], min(k_s, s_dormant.size))]
    if cell.hidden_depth:
        h_dormant = np.flatnonzero(~h_active)
        h_idx = h_dormant[_top_k_stable(h_imp[h_dormant], min(k_h, h_dormant.size))]
    else:
        h_idx = np.empty(0, dtype=np.int64)

    def activate(layer, rows=None, cols=None):
        g = np.asarray(grads[id(layer)])
        act = ActiveSets.of(layer)
        if rows is not None and act.set_c.size:
            for r in rows:
                layer.mask[r, act.set_c] = 1.0
                layer.w[r, act.set_c] = lr * g[r, act.set_c]
        if cols is not None and act.set_r.size:
            for c in cols:
                layer.mask[act.set_r, c] = 1.0
                layer.w[act.set_r, c] = lr * g[act.set_r, c]

    for gate in GATES:
        o_layer = cell.o_layers[gate]
        if cell.hidden_depth:
            h_layer = cell.h_layers[gate]
            activate(h_layer, rows=h_idx, cols=cell.d_x + s_idx)
            activate(o_layer, rows=s_idx, cols=h_idx)
        else:
            activate(o_layer, rows=s_idx, cols=cell.d_x + s_idx)
    if head is not None:
        activate(head, cols=s_idx)
    return cell.active_dims()


# --- ratio-halving schedule --------------------------------------------------

class HalveDecision(Enum):
    CONTINUE = "continue"        # metric within threshold; keep current ratios
    HALVED = "halved"            # violation; revert last prune, ratios halved
    SINGLE_MODE = "single_mode"  # ratios fell below floor; single-unit pruning
    STOP = "stop"                # violation in single-unit mode; flow ends


def halve_on_violation(cfg: GrowPruneConfig, achieved_metric: float,
                       single_mode: bool) -> tuple[GrowPruneConfig, HalveDecision]:
    """Apply the halving rule after a prune+retrain iteration.

    The caller owns checkpoint revert; this only evolves the schedule state.
    """
    if not math.isfinite(achieved_metric):
        raise ContractViolation("achieved metric must be finite")
    if achieved_metric <= cfg.accuracy_threshold:
        return cfg, HalveDecision.CONTINUE
    if single_mode:
        return cfg, HalveDecision.STOP
    new_cfg = replace(cfg, p_r=cfg.p_r / 2.0, p_c=cfg.p_c / 2.0)
    if new_cfg.p_r < cfg.halving_floor and new_cfg.p_c < cfg.halving_floor:
        return new_cfg, HalveDecision.SINGLE_MODE
    return new_cfg, HalveDecision.HALVED


def halve_weight_ratio(cfg: GrowPruneConfig, achieved_metric: float
                       ) -> tuple[GrowPruneConfig, HalveDecision]:
    """Same rule for the weight-pruning ratio; stops at the floor."""
    if achieved_metric <= cfg.accuracy_threshold:
        return cfg, HalveDecision.CONTINUE
    new_cfg = replace(cfg, p_w=cfg.p_w / 2.0)
    if new_cfg.p_w < cfg.halving_floor:
        return new_cfg, HalveDecision.STOP
    return new_cfg, HalveDecision.HALVED


# --- mask snapshot export ----------------------------------------------------

def export_masks(layers: list[MaskedLinear], out_dir: str | Path,
                 tag: str) -> Path:
    """Write one portable bitmap (P1) per layer plus a JSON manifest."""
    out_dir = Path(out_dir)
    out_dir.mkdir(parents=True, exist_ok=True)
    entries = []
    for i, layer in enumerate(layers):
        fname = f"{tag}_{i:02d}_{layer.name.replace('.', '_')}.pbm"
        m, n = layer.mask.shape
        rows = "\n".join(" ".join(str(int(v)) for v in row) for row in layer.mask)
        (out_dir / fname).write_text(f"P1\n{n} {m}\n{rows}\n", encoding="utf-8")
        entries.append({"layer": layer.name, "file": fname,
                        "shape": [m, n], "active": layer.active_count()})
    manifest = out_dir / f"{tag}_manifest.json"
    manifest.write_text(json.dumps({"tag": tag, "layers": entries}, indent=2),
                        encoding="utf-8")
    return manifest
