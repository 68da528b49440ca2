"""
Recompute the published comparison tables from their raw counts.

Every published row gives a weight count, quantization bits and index bits.
From those alone we recompute

    weight store      n * w / 8, checked against the printed value
    relative total    dummy-free lower bound n * (w + i) / 8; the printed
                      total must lie in [bound, bound * (1 + RELATIVE_SLACK)]
    compress rate     printed baseline store / printed weight + index

and, for every non-structured / structured pair, the rate ratio and the PPR
compute verdict.

Printed numbers carry only a few digits, so a printed value "0.26MB" stands for
the interval [0.255, 0.265) MB and consistency is an interval overlap test.
"""

import math
from dataclasses import dataclass, field, replace
from decimal import Decimal
from pathlib import Path
from typing import List, Optional, Tuple, Union

import pandas as pd
import yaml
from loguru import logger

from comparison.ppr import ComputeVerdict, PprModel, StorageVerdict, decide_compute, decide_storage
from models.errors import ConfigError
from storage.report import KB, MB, format_bytes, parse_amount, report_from_counts

DEFAULT_TABLES = Path(__file__).resolve().parent.parent / "data" / "published_tables.json"

STORE_TOLERANCE = 0.02
RELATIVE_SLACK = 0.40
COMPRESS_TOLERANCE = 0.03


@dataclass(frozen=True)
class PublishedRow:
    table: str
    model: str
    regime: str
    method: str
    ours: bool
    accuracy: Optional[str]
    prune_rate: Optional[str]
    weights: Optional[str]
    quant_bits: Optional[int]
    weight_store: Optional[str]
    index_bits: Optional[int]
    relative: Optional[str]
    absolute: Optional[str]
    compress_rate: Optional[str]

    @property
    def has_storage(self) -> bool:
        return None not in (self.weights, self.quant_bits, self.weight_store)


@dataclass(frozen=True)
class PublishedTable:
    id: str
    model: str
    dataset: str
    baseline: PublishedRow
    rows: Tuple[PublishedRow, ...]
    pairs: Tuple[Tuple[str, str], ...]

    def row(self, regime: str, method: str) -> PublishedRow:
        for row in self.rows:
            if row.regime == regime and row.method == method:
                return row
        raise KeyError(f"{self.id}: no {regime} row named {method!r}")


def printed_interval(text: str) -> Tuple[float, float]:
    """Values that round to ``text`` at its printed precision."""
    value = parse_amount(text)
    digits = text.strip().upper().replace("×", "").rstrip("X").rstrip("B").rstrip("MK")
    exponent = Decimal(digits).as_tuple().exponent
    unit = value / float(Decimal(digits)) if float(Decimal(digits)) else 1.0
    half = 0.5 * 10.0 ** exponent * unit
    return value - half, value + half


def _overlap(a: Tuple[float, float], b: Tuple[float, float]) -> bool:
    return a[0] <= b[1] and b[0] <= a[1]


def _row(table_id: str, model: str, data: dict, regime: str = "baseline", method: str = "baseline") -> PublishedRow:
    return PublishedRow(
        table=table_id, model=model, regime=data.get("regime", regime), method=data.get("method", method),
        ours=bool(data.get("ours", False)), accuracy=data.get("accuracy"), prune_rate=data.get("prune_rate", "1.0"),
        weights=data.get("weights"), quant_bits=data.get("quant_bits"), weight_store=data.get("weight_store"),
        index_bits=data.get("index_bits"), relative=data.get("relative", data.get("weight_store")),
        absolute=data.get("absolute", data.get("weight_store")), compress_rate=data.get("compress_rate", "1.0"),
    )


def load_tables(path: Union[str, Path] = DEFAULT_TABLES) -> List[PublishedTable]:
    path = Path(path)
    if not path.exists():
        raise ConfigError(f"table file not found: {path}", field="input")
    with open(path) as f:
        raw = yaml.safe_load(f)
    try:
        tables = []
        for t in raw["tables"]:
            tables.append(PublishedTable(
                id=t["id"], model=t["model"], dataset=t["dataset"],
                baseline=_row(t["id"], t["model"], t["baseline"]),
                rows=tuple(_row(t["id"], t["model"], r) for r in t["rows"]),
                pairs=tuple(tuple(p) for p in t.get("pairs", [])),
            ))
    except (KeyError, TypeError) as exc:
        raise ConfigError(f"malformed table file {path}: {exc}", field="input") from exc
    logger.debug(f"loaded {len(tables)} published tables from {path}")
    return tables


@dataclass
class RowCheck:
    table: str
    regime: str
    method: str
    weight_store: float
    printed_store: float
    store_consistent: bool
    store_error: float
    relative_bound: Optional[float] = None
    printed_relative: Optional[float] = None
    relative_ratio: Optional[float] = None
    relative_ok: Optional[bool] = None
    compress_rate: Optional[float] = None
    printed_compress: Optional[float] = None
    compress_ok: Optional[bool] = None
    notes: List[str] = field(default_factory=list)

    @property
    def store_within_tolerance(self) -> bool:
        return self.store_error <= STORE_TOLERANCE


def check_row(row: PublishedRow, baseline: PublishedRow) -> RowCheck:
    """Recompute the storage columns of one published row from its counts."""
    if not row.has_storage:
        raise ValueError(f"{row.table}/{row.method}: row has no storage columns")
    n = parse_amount(row.weights)
    store = n * row.quant_bits / 8
    printed_store = parse_amount(row.weight_store)
    low, high = printed_interval(row.weights)
    consistent = _overlap((low * row.quant_bits / 8, high * row.quant_bits / 8), printed_interval(row.weight_store))
    check = RowCheck(row.table, row.regime, row.method, store, printed_store, consistent,
                     abs(store - printed_store) / printed_store)
    if not consistent:
        check.notes.append(f"weight store {format_bytes(store)} does not round to {row.weight_store}")

    if row.regime == "nonstructured" and row.index_bits is not None and row.relative is not None:
        bound = report_from_counts(n, n, row.quant_bits, "nonstructured", row.index_bits).relative_bytes
        printed = parse_amount(row.relative)
        check.relative_bound = bound
        check.printed_relative = printed
        check.relative_ratio = printed / bound
        check.relative_ok = printed_interval(row.relative)[1] >= bound and check.relative_ratio <= 1 + RELATIVE_SLACK
        if not check.relative_ok:
            check.notes.append(f"relative total {row.relative} outside [{format_bytes(bound)}, "
                               f"{format_bytes(bound * (1 + RELATIVE_SLACK))}]")

    if row.compress_rate is not None and row.relative is not None and baseline.weight_store is not None:
        rate = parse_amount(baseline.weight_store) / parse_amount(row.relative)
        printed_rate = parse_amount(row.compress_rate)
        check.compress_rate = rate
        check.printed_compress = printed_rate
        check.compress_ok = abs(rate - printed_rate) / printed_rate <= COMPRESS_TOLERANCE
        if not check.compress_ok:
            check.notes.append(f"printed compress rate {row.compress_rate}x disagrees with "
                               f"{baseline.weight_store} / {row.relative} = {rate:.1f}x")
    return check


def check_tables(tables: List[PublishedTable]) -> List[RowCheck]:
    checks = []
    for table in tables:
        for row in (table.baseline,) + table.rows:
            if row.has_storage:
                checks.append(check_row(row, table.baseline))
    return checks


@dataclass
class RatePair:
    table: str
    nonstructured: str
    structured: str
    ns_rate: str
    s_rate: str
    compute: ComputeVerdict
    storage: Optional[StorageVerdict]

    @property
    def ratio_percent(self) -> int:
        """Structured / non-structured rate ratio, in whole percent."""
        return int((Decimal(self.s_rate) / Decimal(self.ns_rate) * 100).quantize(Decimal(1), rounding="ROUND_HALF_UP"))


def _printed_report(row: PublishedRow, baseline: PublishedRow):
    report = report_from_counts(parse_amount(row.weights), parse_amount(baseline.weights), row.quant_bits,
                                row.regime, row.index_bits or 0)
    if row.regime == "nonstructured" and row.relative is not None:
        report = replace(report, relative_bytes=parse_amount(row.relative))
    return report


def rate_pairs(tables: List[PublishedTable], ppr: PprModel = PprModel()) -> List[RatePair]:
    pairs = []
    for table in tables:
        for ns_method, s_method in table.pairs:
            ns = table.row("nonstructured", ns_method)
            s = table.row("structured", s_method)
            storage = None
            if ns.has_storage and s.has_storage:
                storage = decide_storage(_printed_report(ns, table.baseline), _printed_report(s, table.baseline))
            pairs.append(RatePair(table.id, ns_method, s_method, ns.prune_rate, s.prune_rate,
                                  decide_compute(ns.prune_rate, s.prune_rate, ppr), storage))
    return pairs


def checks_frame(checks: List[RowCheck]) -> pd.DataFrame:
    rows = []
    for c in checks:
        scale = MB if c.printed_store >= MB else KB
        unit = "MB" if scale == MB else "KB"
        rows.append({
            "table": c.table,
            "regime": c.regime,
            "method": c.method,
            "weight_store": f"{c.weight_store / scale:.4g}{unit}",
            "printed_store": f"{c.printed_store / scale:.4g}{unit}",
            "store_ok": c.store_consistent,
            "rel_bound": format_bytes(c.relative_bound) if c.relative_bound is not None else "-",
            "rel_printed/bound": round(c.relative_ratio, 3) if c.relative_ratio is not None else math.nan,
            "compress": round(c.compress_rate, 1) if c.compress_rate is not None else math.nan,
            "printed_compress": c.printed_compress if c.printed_compress is not None else math.nan,
            "notes": "; ".join(c.notes),
        })
    return pd.DataFrame(rows)


def pairs_frame(pairs: List[RatePair]) -> pd.DataFrame:
    return pd.DataFrame([{
        "table": p.table,
        "nonstructured": p.nonstructured,
        "structured": p.structured,
        "ns_rate": p.ns_rate,
        "s_rate": p.s_rate,
        "ratio_%": p.ratio_percent,
        "ns_speedup": round(p.compute.nonstructured_speedup, 3),
        "s_speedup": round(p.compute.structured_speedup, 3),
        "compute": p.compute.winner,
        "storage": p.storage.winner if p.storage else "-",
    } for p in pairs])
