"""Local linear surrogates, greedy pattern masks and heat maps.

For image I and attribute i the network is exactly linear around I:
``Y_i = nu . x + beta`` with ``nu`` the probe-layer gradient. A single binary
mask ``rho`` per attribute keeps the units that carry that linear score
across the image set; ``v = rho * nu`` is the attribute's inference vector.
"""

from __future__ import annotations

import json
import math
from dataclasses import dataclass
from pathlib import Path
from typing import Sequence

import numpy as np

from ._io import atomic_write_bytes, atomic_write_text
from .errors import EmptyInput, ShapeMismatch, ValidationError
from .micronet import ActivationTrace, MicroNet, grad_at_probe
from .tensor import tensor_to_bytes


@dataclass
class LocalSurrogate:
    """``score == nu . x + beta``. Arrays may carry a leading image axis."""

    nu: np.ndarray
    beta: float | np.ndarray
    score: float | np.ndarray
    x: np.ndarray

    @property
    def batched(self) -> bool:
        return np.ndim(self.beta) == 1

    def flat(self):
        """(nu, x) as (images, units) matrices."""
        n = len(self.beta) if self.batched else 1
        return self.nu.reshape(n, -1), self.x.reshape(n, -1)

    @property
    def probe_shape(self) -> tuple[int, ...]:
        return self.nu.shape[1:] if self.batched else self.nu.shape

    def __len__(self):
        return len(self.beta) if self.batched else 1


def local_surrogate(net: MicroNet, trace: ActivationTrace, attr_index: int) -> LocalSurrogate:
    nu = grad_at_probe(net, trace, attr_index)
    x = trace.probe
    if trace.batched:
        score = trace.scores[:, attr_index].copy()
        lin = np.einsum("bi,bi->b", nu.reshape(len(trace), -1), x.reshape(len(trace), -1))
        return LocalSurrogate(nu, score - lin, score, x)
    score = float(trace.scores[attr_index])
    return LocalSurrogate(nu, score - float(np.dot(nu.ravel(), x.ravel())), score, x)


def stack_surrogates(items: Sequence[LocalSurrogate]) -> LocalSurrogate:
    if not items:
        raise EmptyInput("no surrogates")
    if any(s.batched for s in items):
        raise ValidationError("stack_surrogates expects single-image surrogates")
    shapes = {s.nu.shape for s in items}
    if len(shapes) != 1:
        raise ShapeMismatch(f"surrogates disagree on probe shape: {sorted(shapes)}")
    return LocalSurrogate(
        np.stack([s.nu for s in items]),
        np.array([s.beta for s in items]),
        np.array([s.score for s in items]),
        np.stack([s.x for s in items]),
    )


# -- greedy mask --------------------------------------------------------------


@dataclass(frozen=True)
class MaskConfig:
    """``lam=None`` selects the scale-relative default, see :func:`default_lambda`."""

    lam: float | None = None
    max_units: int | None = None

    def __post_init__(self):
        if self.lam is not None and not self.lam >= 0:
            raise ValidationError("lambda must be non-negative")
        if self.max_units is not None and self.max_units < 0:
            raise ValidationError("max_units must be non-negative")


@dataclass
class PatternMask:
    rho: np.ndarray
    selected: list[int]
    objective_trace: list[float]
    lam: float
    fidelity: float
    completed: bool = False

    @property
    def selected_count(self) -> int:
        return len(self.selected)


def contributions(surrogates: LocalSurrogate) -> np.ndarray:
    """Per-image, per-unit linear contributions ``nu_u * x_u``."""
    nu, x = surrogates.flat()
    return nu * x


def default_lambda(surrogates: LocalSurrogate, factor: float = 0.01) -> float:
    """``factor * E_I[(nu . x)^2] / N``."""
    c = contributions(surrogates)
    lin = c.sum(axis=1)
    return factor * float(np.mean(lin * lin)) / c.shape[1]


def fidelity_loss(surrogates: LocalSurrogate, rho) -> float:
    """``E_I[((rho - 1) * nu . x)^2]``, i.e. the squared score error of the masked representation."""
    c = contributions(surrogates)
    keep = np.asarray(rho, dtype=np.float64).ravel()
    if keep.size != c.shape[1]:
        raise ShapeMismatch(f"mask has {keep.size} units, surrogates {c.shape[1]}")
    r = (c * (keep - 1.0)).sum(axis=1)
    return float(np.mean(r * r))


def objective(surrogates: LocalSurrogate, rho, lam: float) -> float:
    return fidelity_loss(surrogates, rho) + lam * float(np.sum(rho))


def greedy_mask(surrogates: LocalSurrogate, cfg: MaskConfig = MaskConfig()) -> PatternMask:
    """Forward selection of units minimising ``E_I[r^2] + lam * |rho|``.

    Each step adds the unit with the largest drop in ``E_I[r^2]`` (lowest index
    on ties) while that drop exceeds ``lam``. When single additions stall on a
    non-empty mask, one bulk step adding every remaining contributing unit is
    tried and accepted if its drop exceeds ``lam`` per added unit; single-unit
    stalls happen with mixed-sign contributions even at ``lam = 0``.
    """
    if len(surrogates) == 0:
        raise EmptyInput("no images")
    c = contributions(surrogates)
    n_img, n_units = c.shape
    if n_img == 0:
        raise EmptyInput("no images")
    lam = default_lambda(surrogates) if cfg.lam is None else float(cfg.lam)
    cap = n_units if cfg.max_units is None else min(cfg.max_units, n_units)

    energy = np.mean(c * c, axis=0)
    live = np.any(c != 0.0, axis=0)
    selected = np.zeros(n_units, dtype=bool)
    order: list[int] = []
    r = -c.sum(axis=1)
    fid = float(np.mean(r * r))
    trace = [fid]
    completed = False
    while len(order) < cap:
        # E[(r + c_k)^2] = E[r^2] + 2 E[r c_k] + E[c_k^2]
        drop = -(2.0 * (r @ c) / n_img + energy)
        drop[selected] = -np.inf
        k = int(np.argmax(drop))
        if drop[k] > lam:
            selected[k] = True
            order.append(k)
            r = r + c[:, k]
            fid = float(np.mean(r * r))
            trace.append(fid + lam * len(order))
            continue
        rest = np.flatnonzero(live & ~selected)
        if order and rest.size and len(order) + rest.size <= cap and fid > lam * rest.size:
            selected[rest] = True
            order.extend(int(u) for u in rest)
            fid = fidelity_loss(surrogates, selected)
            trace.append(fid + lam * len(order))
            completed = True
        break

    rho = selected.astype(np.float64).reshape(surrogates.probe_shape)
    return PatternMask(rho, order, trace, lam, fidelity_loss(surrogates, rho), completed)


def exhaustive_best(surrogates: LocalSurrogate, lam: float) -> tuple[np.ndarray, float]:
    """Brute force over all 2^N masks. Only for tiny N."""
    c = contributions(surrogates)
    n_units = c.shape[1]
    if n_units > 16:
        raise ValidationError("exhaustive search limited to 16 units")
    best, best_rho = math.inf, None
    for code in range(1 << n_units):
        rho = np.array([(code >> u) & 1 for u in range(n_units)], dtype=np.float64)
        val = objective(surrogates, rho, lam)
        if val < best:
            best, best_rho = val, rho
    return best_rho.reshape(surrogates.probe_shape), best


def inference_vector(mask: PatternMask | np.ndarray, surrogate: LocalSurrogate) -> np.ndarray:
    """``rho * nu``; works on a single surrogate or a batch."""
    rho = mask.rho if isinstance(mask, PatternMask) else np.asarray(mask, dtype=np.float64)
    if rho.shape != surrogate.probe_shape:
        raise ShapeMismatch(f"mask {rho.shape} vs probe {surrogate.probe_shape}")
    return rho * surrogate.nu


# -- heat maps ----------------------------------------------------------------


def heatmap(v, x, spatial_shape: tuple[int, int, int]) -> np.ndarray:
    """Signed per-position contribution map: sum over channels of ``v_u * x_u``."""
    c, h, w = spatial_shape
    v = np.asarray(v, dtype=np.float64).ravel()
    x = np.asarray(x, dtype=np.float64).ravel()
    if v.size != c * h * w or x.size != c * h * w:
        raise ShapeMismatch(f"lengths {v.size}, {x.size} vs {c}*{h}*{w}")
    return (v * x).reshape(c, h, w).sum(axis=0)


def heatmap_to_pgm(hmap) -> tuple[bytes, dict]:
    """8-bit PGM with symmetric signed scaling; zero maps to mid-grey."""
    hmap = np.asarray(hmap, dtype=np.float64)
    scale = float(np.max(np.abs(hmap))) if hmap.size else 0.0
    unit = hmap / scale if scale > 0 else np.zeros_like(hmap)
    pix = np.clip(np.floor(127.5 + 127.5 * unit + 0.5), 0, 255).astype(np.uint8)
    h, w = pix.shape
    data = f"P5\n{w} {h}\n255\n".encode("ascii") + pix.tobytes()
    meta = {"scale": scale, "zero_level": 127.5,
            "decode": "value = (pixel - 127.5) / 127.5 * scale", "height": h, "width": w}
    return data, meta


def write_heatmap(stem: Path, hmap) -> list[Path]:
    """Write ``stem.pgm``, its ``stem.json`` sidecar and the raw ``stem.bltn``."""
    stem = Path(stem)
    data, meta = heatmap_to_pgm(hmap)
    paths = [stem.with_suffix(".pgm"), stem.with_suffix(".json"), stem.with_suffix(".bltn")]
    atomic_write_bytes(paths[0], data)
    atomic_write_text(paths[1], json.dumps(meta, indent=2, sort_keys=True) + "\n")
    atomic_write_bytes(paths[2], tensor_to_bytes(hmap))
    return paths
