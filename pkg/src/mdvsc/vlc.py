"""Entropy-based variable-length coding: budgets, norm masks, wire format.

A Budget fixes how many feature elements survive transmission, either as a
single top-K pool over all maps (``global_topk``) or as per-map drop ratios
(``split``).  Drop ratios are held as exact rationals so trading budget
between the common map and the individual maps (one step of ratio for the
common map per GOP frame) never changes the total kept count.  The norm mask
ranks elements by a score policy; kept values become the channel symbols and
the kept-index bitmap travels in the payload header over an idealized
error-free control channel.
"""

from __future__ import annotations

import math
import struct
from dataclasses import dataclass, replace
from fractions import Fraction

import numpy as np

from .entropy_model import EntropyMap
from .model_division import FeatureSet
from .transform_codec import FeatureMap
from .video_model import SymbolStream

POLICIES = ("entropy", "power", "random", "inv_entropy", "inv_power")

MAGIC = b"MDVS"
WIRE_VERSION = 1
_HEADER = struct.Struct("<4sBIB3H3Hf")  # magic, version, gop_id, N, feat dims, frame dims, scale


class PayloadFormatError(ValueError):
    """Malformed payload bytes; ``offset`` points at the failing position."""

    def __init__(self, message: str, offset: int):
        super().__init__(f"{message} (offset {offset})")
        self.offset = offset


def _to_fraction(x) -> Fraction:
    if isinstance(x, Fraction):
        return x
    if isinstance(x, int):
        return Fraction(x)
    # floats are read as their shortest decimal form, so 0.1 means 1/10
    return Fraction(str(x))


@dataclass(frozen=True)
class Budget:
    """Symbol budget for one GOP transmission.

    ``global_topk`` keeps the floor(target_cbr * source_dim) best-scoring
    elements across all maps; ``split`` keeps (1 - drop ratio) of each map.
    ``gop_size`` and ``source_dim`` contextualize the ratios and only need
    to be set for the modes that use them.
    """

    target_cbr: float | None = None
    mode: str = "global_topk"
    drop_common: Fraction = Fraction(0)
    drop_individual: Fraction = Fraction(0)
    trade_t: Fraction = Fraction(0)
    gop_size: int | None = None
    source_dim: int | None = None
    mask_overhead_bits_per_symbol: float | None = None

    def __post_init__(self):
        if self.mode not in ("global_topk", "split"):
            raise ValueError(f"unknown budget mode {self.mode!r}")
        object.__setattr__(self, "drop_common", _to_fraction(self.drop_common))
        object.__setattr__(self, "drop_individual", _to_fraction(self.drop_individual))
        object.__setattr__(self, "trade_t", _to_fraction(self.trade_t))
        for name in ("drop_common", "drop_individual"):
            r = getattr(self, name)
            if not 0 <= r <= 1:
                raise ValueError(f"{name} must lie in [0, 1], got {r}")
        if self.target_cbr is not None:
            if not 0.0 < self.target_cbr <= 1.0:
                raise ValueError(f"target_cbr must lie in (0, 1], got {self.target_cbr}")

    def with_source_dim(self, source_dim: int) -> "Budget":
        return replace(self, source_dim=source_dim)

    def symbol_budget(self) -> int:
        """floor(target_cbr * source_dim); requires both to be set."""
        if self.target_cbr is None or self.source_dim is None:
            raise ValueError("budget needs target_cbr and source_dim")
        k = math.floor(_to_fraction(self.target_cbr) * self.source_dim)
        if k < 0:
            raise ValueError("negative symbol budget")
        return k


def trade_budget(budget: Budget, delta_individual) -> Budget:
    """Shift drop ratio from the common map to the individuals (or back).

    Raising the individual drop ratio by delta lowers the common drop ratio
    by gop_size * delta, which keeps the total kept count invariant.
    """
    if budget.gop_size is None:
        raise ValueError("trade_budget needs budget.gop_size")
    d = _to_fraction(delta_individual)
    new_i = budget.drop_individual + d
    new_c = budget.drop_common - budget.gop_size * d
    if not (0 <= new_i <= 1 and 0 <= new_c <= 1):
        raise ValueError(
            f"infeasible trade: dr(c)={float(new_c):.4f}, dr(i)={float(new_i):.4f} "
            "must stay in [0, 1]"
        )
    return replace(
        budget,
        drop_individual=new_i,
        drop_common=new_c,
        trade_t=budget.trade_t + d,
    )


@dataclass(frozen=True)
class MaskPlan:
    """Kept flat indices per map, transmission order (individuals, common)."""

    kept_indices: tuple[tuple[int, ...], ...]
    total_kept: int
    map_numel: int
    clipped: bool = False

    def __post_init__(self):
        cleaned = []
        for idxs in self.kept_indices:
            t = tuple(int(i) for i in idxs)
            if any(i < 0 or i >= self.map_numel for i in t):
                raise ValueError("mask index out of range")
            if list(t) != sorted(set(t)):
                raise ValueError("mask indices must be sorted and unique")
            cleaned.append(t)
        object.__setattr__(self, "kept_indices", tuple(cleaned))
        if self.total_kept != sum(len(t) for t in cleaned):
            raise ValueError("total_kept does not match kept index lists")

    @property
    def num_units(self) -> int:
        return len(self.kept_indices)

    def to_bitmap(self) -> bytes:
        bits = np.zeros(self.num_units * self.map_numel, dtype=np.uint8)
        for u, idxs in enumerate(self.kept_indices):
            if idxs:
                bits[np.asarray(idxs, dtype=np.int64) + u * self.map_numel] = 1
        return np.packbits(bits, bitorder="little").tobytes()

    @classmethod
    def from_bitmap(cls, raw: bytes, num_units: int, map_numel: int) -> "MaskPlan":
        total = num_units * map_numel
        bits = np.unpackbits(np.frombuffer(raw, dtype=np.uint8), bitorder="little", count=total)
        kept = []
        for u in range(num_units):
            chunk = bits[u * map_numel : (u + 1) * map_numel]
            kept.append(tuple(int(i) for i in np.flatnonzero(chunk)))
        return cls(
            kept_indices=tuple(kept),
            total_kept=int(bits.sum()),
            map_numel=map_numel,
        )


def _policy_scores(
    bits: np.ndarray, values: np.ndarray, policy: str, rng: np.random.Generator | None
) -> np.ndarray:
    if policy == "entropy":
        return bits
    if policy == "inv_entropy":
        return -bits
    if policy == "power":
        return values ** 2
    if policy == "inv_power":
        return -(values ** 2)
    if policy == "random":
        if rng is None:
            raise ValueError("random policy needs an explicit rng")
        return rng.uniform(size=bits.shape)
    raise ValueError(f"unknown mask policy {policy!r}; choose from {POLICIES}")


def _top_k_indices(scores: np.ndarray, k: int) -> np.ndarray:
    # stable sort on -score keeps ties in ascending flat-index order
    order = np.argsort(-scores, kind="stable")
    return order[:k]


def _split_counts(budget: Budget, n_units: int, map_numel: int, bits: np.ndarray) -> list[int]:
    """Per-map kept counts for split mode.

    Per-map quotas (1 - drop ratio) * M are floored and the remainder up to
    floor of the exact total is granted greedily to whichever map's next
    unkept element costs the most bits; this keeps the total invariant
    under budget trades.
    """
    n_individual = n_units - 1
    m = Fraction(map_numel)
    quota_c = (1 - budget.drop_common) * m
    quota_i = (1 - budget.drop_individual) * m
    total = math.floor(quota_c + n_individual * quota_i)
    counts = [math.floor(quota_i)] * n_individual + [math.floor(quota_c)]
    remainder = total - sum(counts)
    if remainder > 0:
        ranked = [np.sort(bits[u])[::-1] for u in range(n_units)]
        for _ in range(remainder):
            marginal = [
                ranked[u][counts[u]] if counts[u] < map_numel else -np.inf
                for u in range(n_units)
            ]
            best = int(np.argmax(marginal))
            counts[best] += 1
    return counts


def build_mask(
    entropies: tuple[EntropyMap, list[EntropyMap]],
    budget: Budget,
    policy: str,
    values: FeatureSet,
    rng: np.random.Generator | None = None,
) -> MaskPlan:
    """Select which feature elements survive, under the budget and policy.

    Returns kept indices per map in unit order (individuals then common).
    If the budget exceeds the available elements everything is kept and the
    plan is marked ``clipped``.
    """
    common_ent, individual_ents = entropies
    n_units = values.gop_size + 1
    if len(individual_ents) != values.gop_size:
        raise ValueError("one entropy map per individual feature map required")
    m = values.map_numel

    bits = np.stack(
        [np.asarray(e.bits, dtype=np.float64).ravel() for e in individual_ents]
        + [np.asarray(common_ent.bits, dtype=np.float64).ravel()]
    )
    vals = np.stack([np.asarray(u.data, dtype=np.float64).ravel() for u in values.units()])
    if bits.shape != vals.shape:
        raise ValueError("entropy maps are not aligned with the feature set")
    scores = _policy_scores(bits, vals, policy, rng)

    if budget.mode == "global_topk":
        k = budget.symbol_budget()
        clipped = k > n_units * m
        k = min(k, n_units * m)
        flat_keep = _top_k_indices(scores.ravel(), k)
        kept = [[] for _ in range(n_units)]
        for f in flat_keep:
            kept[int(f) // m].append(int(f) % m)
        plan = MaskPlan(
            kept_indices=tuple(tuple(sorted(u)) for u in kept),
            total_kept=k,
            map_numel=m,
            clipped=clipped,
        )
    else:
        counts = _split_counts(budget, n_units, m, bits)
        if budget.target_cbr is not None and budget.source_dim is not None:
            if sum(counts) > budget.symbol_budget():
                raise ValueError(
                    f"split budget keeps {sum(counts)} symbols, exceeding the "
                    f"target_cbr budget of {budget.symbol_budget()}"
                )
        kept = [
            tuple(sorted(int(i) for i in _top_k_indices(scores[u], counts[u])))
            for u in range(n_units)
        ]
        plan = MaskPlan(
            kept_indices=tuple(kept),
            total_kept=sum(counts),
            map_numel=m,
        )
    return plan


def apply_mask(fset: FeatureSet, plan: MaskPlan) -> SymbolStream:
    """Gather kept values into the channel symbol stream.

    Unit order is individuals[0..N-1] then common; within a unit, values
    appear in flat-index order.
    """
    units = fset.units()
    if plan.num_units != len(units):
        raise ValueError("mask plan does not match the feature set")
    if plan.map_numel != fset.map_numel:
        raise ValueError("mask plan sized for a different map")
    chunks = []
    counts = []
    for unit, idxs in zip(units, plan.kept_indices):
        flat = np.asarray(unit.data).ravel()
        picked = flat[list(idxs)] if idxs else np.empty(0, dtype=flat.dtype)
        chunks.append(picked)
        counts.append(len(idxs))
    symbols = np.concatenate(chunks) if chunks else np.empty(0, dtype=np.float32)
    return SymbolStream(symbols=symbols.astype(np.float32), per_unit_counts=tuple(counts))


def zero_fill(stream: SymbolStream, plan: MaskPlan, map_shape: tuple[int, int, int]) -> FeatureSet:
    """Receiver-side inverse of masking: received values in, zeros elsewhere."""
    h, w, c = map_shape
    m = h * w * c
    if plan.map_numel != m:
        raise ValueError("mask plan sized for a different map shape")
    if stream.symbol_count != plan.total_kept:
        raise ValueError(
            f"stream carries {stream.symbol_count} symbols, plan expects {plan.total_kept}"
        )
    if tuple(stream.per_unit_counts) != tuple(len(i) for i in plan.kept_indices):
        raise ValueError("per-unit symbol counts disagree with the mask plan")
    maps = []
    offset = 0
    for idxs in plan.kept_indices:
        flat = np.zeros(m, dtype=np.float32)
        k = len(idxs)
        if k:
            flat[list(idxs)] = stream.symbols[offset : offset + k]
        offset += k
        maps.append(FeatureMap(flat.reshape(h, w, c)))
    return FeatureSet(common=maps[-1], individuals=tuple(maps[:-1]))


@dataclass(frozen=True)
class Payload:
    """Everything the receiver gets: header metadata plus body symbols.

    The header (ids, shapes, normalization scale, kept-index bitmap) rides
    an idealized error-free side channel; only ``body`` crosses the noisy
    channel.
    """

    gop_id: int
    gop_size: int
    feature_shape: tuple[int, int, int]
    frame_shape: tuple[int, int, int]
    scale: float
    plan: MaskPlan
    body: np.ndarray

    def __post_init__(self):
        body = np.asarray(self.body, dtype=np.float32).ravel()
        if body.size != self.plan.total_kept:
            raise ValueError(
                f"body carries {body.size} symbols, plan expects {self.plan.total_kept}"
            )
        if self.plan.num_units != self.gop_size + 1:
            raise ValueError("plan must cover gop_size individual maps plus one common map")
        h, w, c = self.feature_shape
        if h * w * c != self.plan.map_numel:
            raise ValueError("feature shape does not match the plan's map size")
        body = body.copy()
        body.flags.writeable = False
        object.__setattr__(self, "body", body)
        # scale crosses the wire as float32; normalize now so round-trips are exact
        object.__setattr__(self, "scale", float(np.float32(self.scale)))

    def with_body(self, body: np.ndarray) -> "Payload":
        return replace(self, body=body)


def serialize(payload: Payload) -> bytes:
    """Encode a payload to the little-endian wire format."""
    fh, fw, fc = payload.feature_shape
    h, w, c = payload.frame_shape
    if not 0 <= payload.gop_id < 2 ** 32:
        raise ValueError("gop_id does not fit in u32")
    if not 1 <= payload.gop_size <= 255:
        raise ValueError("gop_size does not fit in u8")
    if max(fh, fw, fc, h, w, c) >= 2 ** 16:
        raise ValueError("dimension does not fit in u16")
    header = _HEADER.pack(
        MAGIC, WIRE_VERSION, payload.gop_id, payload.gop_size,
        fh, fw, fc, h, w, c, payload.scale,
    )
    return header + payload.plan.to_bitmap() + payload.body.astype("<f4").tobytes()


def deserialize(data: bytes) -> Payload:
    """Decode wire bytes back into a payload; bit-exact round trip."""
    if len(data) < 4 or data[:4] != MAGIC:
        raise PayloadFormatError("bad magic", 0)
    if len(data) < 5:
        raise PayloadFormatError("truncated before version byte", len(data))
    if data[4] != WIRE_VERSION:
        raise PayloadFormatError(f"unsupported version {data[4]}", 4)
    if len(data) < _HEADER.size:
        raise PayloadFormatError("truncated fixed header", len(data))
    (_, _, gop_id, n, fh, fw, fc, h, w, c, scale) = _HEADER.unpack_from(data, 0)
    if n < 1:
        raise PayloadFormatError("gop_size must be >= 1", 5)
    map_numel = fh * fw * fc
    if map_numel == 0:
        raise PayloadFormatError("zero-sized feature shape", 6)
    bitmap_len = math.ceil((n + 1) * map_numel / 8)
    off = _HEADER.size
    if len(data) < off + bitmap_len:
        raise PayloadFormatError("truncated mask bitmap", len(data))
    plan = MaskPlan.from_bitmap(data[off : off + bitmap_len], n + 1, map_numel)
    off += bitmap_len
    body_len = 4 * plan.total_kept
    if len(data) != off + body_len:
        raise PayloadFormatError(
            f"body length {len(data) - off} does not match {body_len}", off
        )
    body = np.frombuffer(data, dtype="<f4", count=plan.total_kept, offset=off).copy()
    return Payload(
        gop_id=gop_id,
        gop_size=n,
        feature_shape=(fh, fw, fc),
        frame_shape=(h, w, c),
        scale=scale,
        plan=plan,
        body=body,
    )
