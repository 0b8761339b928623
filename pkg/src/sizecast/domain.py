"""Core data model: orders, articles, size grids, and ingestion.

Sizes live on one continuous axis in "normalized units"; raw sizes from
heterogeneous size systems are mapped onto it by a per-system affine map
(identity by default). Return reasons other than kept / too-small /
too-big are dropped at ingestion and never stored.
"""

from __future__ import annotations

import csv
import enum
import math
from dataclasses import dataclass, field
from datetime import datetime, timezone
from typing import IO, Iterable, Iterator, Mapping

from .errors import CatalogError, ConfigError, IngestError

STEP_TOLERANCE = 1e-9

ORDERS_HEADER = ("order_id", "customer_id", "article_id", "size", "status", "timestamp")
CATALOG_HEADER = ("article_id", "brand", "category", "gender", "size_system", "sizes")


class ReturnStatus(enum.Enum):
    """Outcome of a purchase: kept, returned too small, or returned too big."""

    KEPT = "kept"
    TOO_SMALL = "too_small"
    TOO_BIG = "too_big"

    @property
    def code(self) -> str:
        return self.value

    @property
    def index(self) -> int:
        """Stable position in count triples: (kept, too_small, too_big)."""
        return _STATUS_INDEX[self]


_STATUS_INDEX = {ReturnStatus.KEPT: 0, ReturnStatus.TOO_SMALL: 1, ReturnStatus.TOO_BIG: 2}
STATUSES = (ReturnStatus.KEPT, ReturnStatus.TOO_SMALL, ReturnStatus.TOO_BIG)
_STATUS_BY_CODE = {s.code: s for s in STATUSES}
OTHER_RETURN_CODE = "other"


@dataclass(frozen=True, slots=True)
class Order:
    """One purchase event in normalized size units."""

    order_id: str
    customer_id: str
    article_id: str
    size: float
    status: ReturnStatus
    timestamp: datetime

    def __post_init__(self) -> None:
        if not math.isfinite(self.size):
            raise ValueError(f"order {self.order_id}: size must be finite")
        if self.timestamp.tzinfo is None:
            raise ValueError(f"order {self.order_id}: timestamp must carry a UTC offset")


@dataclass(frozen=True, slots=True)
class ArticleMeta:
    """Catalog entry; sizes are normalized and uniformly spaced with step `step`."""

    article_id: str
    brand: str
    category: str
    gender: str
    size_system: str
    sizes: tuple[float, ...]
    step: float

    @property
    def prior_key(self) -> tuple[str, str, str]:
        """Lookup key into the size-prior table."""
        return (self.category, self.gender, self.size_system)


@dataclass(frozen=True, slots=True)
class SizeGrid:
    """Uniformly spaced ladder of purchasable sizes."""

    sizes: tuple[float, ...]
    step: float

    def __post_init__(self) -> None:
        if len(self.sizes) < 1:
            raise ValueError("size grid needs at least one size")
        if not self.step > 0:
            raise ValueError("size grid step must be positive")
        for lo, hi in zip(self.sizes, self.sizes[1:]):
            if abs((hi - lo) - self.step) > STEP_TOLERANCE:
                raise ValueError("size grid spacing deviates from its step")

    def __len__(self) -> int:
        return len(self.sizes)

    def index_of(self, size: float) -> int | None:
        """Index of `size` on the grid, or None if it is not a grid point."""
        idx = round((size - self.sizes[0]) / self.step)
        if 0 <= idx < len(self.sizes) and abs(self.sizes[idx] - size) <= 1e-9 + 1e-9 * abs(size):
            return idx
        return None

    def snap(self, value: float) -> float:
        """Nearest grid size; values beyond the ends clamp to the extremes."""
        idx = round((value - self.sizes[0]) / self.step)
        idx = min(max(idx, 0), len(self.sizes) - 1)
        return self.sizes[idx]


@dataclass(frozen=True)
class Catalog:
    """Immutable article_id -> ArticleMeta lookup."""

    articles: Mapping[str, ArticleMeta]

    def __contains__(self, article_id: str) -> bool:
        return article_id in self.articles

    def __len__(self) -> int:
        return len(self.articles)

    def get(self, article_id: str) -> ArticleMeta:
        try:
            return self.articles[article_id]
        except KeyError:
            raise CatalogError(f"article {article_id!r} not present in catalog") from None

    def ids(self) -> list[str]:
        return sorted(self.articles)


@dataclass(frozen=True)
class SizeSystemConfig:
    """Per-size-system affine map raw -> normalized plus single-size default steps."""

    affine: Mapping[str, tuple[float, float]] = field(default_factory=dict)
    default_steps: Mapping[str, float] = field(default_factory=dict)
    fallback_step: float = 1.0

    def __post_init__(self) -> None:
        for system, (scale, _) in self.affine.items():
            if not scale > 0:
                raise ConfigError(f"size system {system!r}: scale must be positive")
        for system, step in self.default_steps.items():
            if not step > 0:
                raise ConfigError(f"size system {system!r}: default step must be positive")
        if not self.fallback_step > 0:
            raise ConfigError("fallback step must be positive")

    @classmethod
    def identity(cls) -> "SizeSystemConfig":
        return cls()

    def scale_offset(self, system: str) -> tuple[float, float]:
        return self.affine.get(system, (1.0, 0.0))

    def normalize(self, system: str, raw: float) -> float:
        scale, offset = self.scale_offset(system)
        return scale * raw + offset

    def default_step(self, system: str) -> float:
        return self.default_steps.get(system, self.fallback_step)


def parse_size_config(stream: Iterable[str] | IO[str]) -> SizeSystemConfig:
    """Parse the key-value config: `system,scale,offset` and `system,default_step` rows."""
    affine: dict[str, tuple[float, float]] = {}
    steps: dict[str, float] = {}
    for lineno, row in enumerate(csv.reader(_lines(stream)), start=1):
        if not row or row[0].lstrip().startswith("#"):
            continue
        try:
            if len(row) == 3:
                affine[row[0].strip()] = (float(row[1]), float(row[2]))
            elif len(row) == 2:
                steps[row[0].strip()] = float(row[1])
            else:
                raise ValueError("expected 2 or 3 fields")
        except ValueError as exc:
            raise ConfigError(f"size config line {lineno}: {exc}") from None
    return SizeSystemConfig(affine=affine, default_steps=steps)


@dataclass(frozen=True, slots=True)
class RowError:
    line: int
    reason: str


@dataclass(frozen=True)
class IngestStats:
    """Row accounting: accepted + other_returns + malformed + unknown_article = total."""

    accepted: int = 0
    other_returns: int = 0
    malformed: int = 0
    unknown_article: int = 0
    errors: tuple[RowError, ...] = ()

    @property
    def total(self) -> int:
        return self.accepted + self.other_returns + self.malformed + self.unknown_article


@dataclass(frozen=True)
class OrdersDataset:
    """Parsed purchase events plus ingestion accounting."""

    orders: tuple[Order, ...]
    ingest_stats: IngestStats = field(default_factory=IngestStats)

    def __len__(self) -> int:
        return len(self.orders)

    def customer_ids(self) -> set[str]:
        return {o.customer_id for o in self.orders}

    def article_ids(self) -> set[str]:
        return {o.article_id for o in self.orders}

    def time_span(self) -> tuple[datetime, datetime]:
        if not self.orders:
            raise ValueError("empty dataset has no time span")
        stamps = [o.timestamp for o in self.orders]
        return min(stamps), max(stamps)


def parse_timestamp(raw: str) -> datetime:
    """Parse an RFC 3339 timestamp; the offset is required and converted to UTC."""
    text = raw.strip()
    if text.endswith(("Z", "z")):
        text = text[:-1] + "+00:00"
    ts = datetime.fromisoformat(text)
    if ts.tzinfo is None:
        raise ValueError("timestamp lacks a UTC offset")
    return ts.astimezone(timezone.utc)


def format_timestamp(ts: datetime) -> str:
    return ts.astimezone(timezone.utc).isoformat().replace("+00:00", "Z")


def _lines(stream: Iterable[str] | IO[str]) -> Iterator[str]:
    for line in stream:
        yield line.rstrip("\r\n")


def _check_header(row: list[str] | None, expected: tuple[str, ...], what: str) -> None:
    if row is None or tuple(f.strip() for f in row) != expected:
        raise IngestError(f"{what} header must be {','.join(expected)!r}, got {row!r}")


def parse_orders(
    stream: Iterable[str] | IO[str],
    config: SizeSystemConfig,
    catalog: Catalog,
    max_error_rate: float = 0.10,
) -> OrdersDataset:
    """Ingest the orders CSV, keeping only kept/too_small/too_big purchases.

    Rows are handled fail-soft: malformed rows are recorded with their line
    number and skipped, "other"-reason returns and unknown articles are
    counted and dropped. Ingestion aborts only when the malformed-row rate
    exceeds `max_error_rate`.
    """
    reader = csv.reader(_lines(stream))
    header = next(reader, None)
    _check_header(header, ORDERS_HEADER, "orders")

    orders: list[Order] = []
    errors: list[RowError] = []
    other_returns = 0
    unknown_article = 0
    total = 0
    for lineno, row in enumerate(reader, start=2):
        if not row:
            continue
        total += 1
        if len(row) != len(ORDERS_HEADER):
            errors.append(RowError(lineno, f"expected {len(ORDERS_HEADER)} fields, got {len(row)}"))
            continue
        order_id, customer_id, article_id, raw_size, status_code, raw_ts = (f.strip() for f in row)
        if not order_id or not customer_id or not article_id:
            errors.append(RowError(lineno, "empty id field"))
            continue
        status_code = status_code.lower()
        if status_code == OTHER_RETURN_CODE:
            other_returns += 1
            continue
        status = _STATUS_BY_CODE.get(status_code)
        if status is None:
            errors.append(RowError(lineno, f"unknown status {status_code!r}"))
            continue
        try:
            size = float(raw_size)
        except ValueError:
            errors.append(RowError(lineno, f"unparseable size {raw_size!r}"))
            continue
        if not math.isfinite(size):
            errors.append(RowError(lineno, f"non-finite size {raw_size!r}"))
            continue
        try:
            timestamp = parse_timestamp(raw_ts)
        except ValueError as exc:
            errors.append(RowError(lineno, f"bad timestamp {raw_ts!r}: {exc}"))
            continue
        if article_id not in catalog:
            unknown_article += 1
            continue
        article = catalog.get(article_id)
        orders.append(
            Order(
                order_id=order_id,
                customer_id=customer_id,
                article_id=article_id,
                size=config.normalize(article.size_system, size),
                status=status,
                timestamp=timestamp,
            )
        )

    if total > 0 and len(errors) / total > max_error_rate:
        preview = "; ".join(f"line {e.line}: {e.reason}" for e in errors[:5])
        raise IngestError(
            f"malformed-row rate {len(errors)}/{total} exceeds {max_error_rate:.0%} ({preview})"
        )
    stats = IngestStats(
        accepted=len(orders),
        other_returns=other_returns,
        malformed=len(errors),
        unknown_article=unknown_article,
        errors=tuple(errors),
    )
    return OrdersDataset(orders=tuple(orders), ingest_stats=stats)


def parse_catalog(
    stream: Iterable[str] | IO[str],
    config: SizeSystemConfig | None = None,
) -> Catalog:
    """Parse the catalog CSV; sizes are normalized into continuous size units.

    Catalog files are curated inputs, so problems here are fatal: duplicate
    article ids and non-uniform size ladders raise with a diagnostic naming
    the article. Single-size articles take the per-size-system default step.
    """
    config = config or SizeSystemConfig.identity()
    reader = csv.reader(_lines(stream))
    header = next(reader, None)
    _check_header(header, CATALOG_HEADER, "catalog")

    articles: dict[str, ArticleMeta] = {}
    for lineno, row in enumerate(reader, start=2):
        if not row:
            continue
        if len(row) != len(CATALOG_HEADER):
            raise CatalogError(f"catalog line {lineno}: expected {len(CATALOG_HEADER)} fields")
        article_id, brand, category, gender, size_system, raw_sizes = (f.strip() for f in row)
        if article_id in articles:
            raise CatalogError(f"catalog line {lineno}: duplicate article {article_id!r}")
        try:
            raw = [float(part) for part in raw_sizes.split(";") if part.strip()]
        except ValueError:
            raise CatalogError(
                f"catalog line {lineno}: article {article_id!r} has unparseable sizes {raw_sizes!r}"
            ) from None
        if not raw:
            raise CatalogError(f"catalog line {lineno}: article {article_id!r} lists no sizes")
        scale, offset = config.scale_offset(size_system)
        sizes = tuple(scale * s + offset for s in raw)
        if len(sizes) == 1:
            step = config.default_step(size_system)
        else:
            step = sizes[1] - sizes[0]
            if step <= 0:
                raise CatalogError(
                    f"catalog line {lineno}: article {article_id!r} sizes are not increasing"
                )
            for lo, hi in zip(sizes, sizes[1:]):
                if abs((hi - lo) - step) > STEP_TOLERANCE:
                    raise CatalogError(
                        f"catalog line {lineno}: article {article_id!r} has a non-uniform "
                        f"size step ({raw_sizes!r})"
                    )
        articles[article_id] = ArticleMeta(
            article_id=article_id,
            brand=brand,
            category=category,
            gender=gender,
            size_system=size_system,
            sizes=sizes,
            step=step,
        )
    return Catalog(articles=articles)


def size_grid(article: ArticleMeta) -> SizeGrid:
    """The article's size ladder as a grid (step resolved at catalog parse)."""
    return SizeGrid(sizes=article.sizes, step=article.step)


def format_float(value: float) -> str:
    """Shortest round-trip decimal form, used for deterministic file output."""
    return repr(float(value))


def write_orders_csv(dataset: OrdersDataset, stream: IO[str]) -> None:
    writer = csv.writer(stream, lineterminator="\n")
    writer.writerow(ORDERS_HEADER)
    for o in dataset.orders:
        writer.writerow(
            [
                o.order_id,
                o.customer_id,
                o.article_id,
                format_float(o.size),
                o.status.code,
                format_timestamp(o.timestamp),
            ]
        )


def write_catalog_csv(catalog: Catalog, stream: IO[str]) -> None:
    writer = csv.writer(stream, lineterminator="\n")
    writer.writerow(CATALOG_HEADER)
    for article_id in catalog.ids():
        a = catalog.get(article_id)
        writer.writerow(
            [
                a.article_id,
                a.brand,
                a.category,
                a.gender,
                a.size_system,
                ";".join(format_float(s) for s in a.sizes),
            ]
        )
