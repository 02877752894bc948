"""Canonical data model, file formats, and loaders.

Everything downstream consumes a validated, immutable ``SchemeDataset``
built from four file-based inputs:

* transactions — NDJSON, one object per line
* roster       — CSV of scheme ("Ponzi") addresses and member metadata
* wallets      — CSV mapping addresses to wallet ids and service categories
* prices       — CSV of daily USD/BTC prices

All money arithmetic is integer satoshi internally; USD conversion happens
only at reporting boundaries, in exact decimal, rounded half-even to cents.
A "day" is the UTC calendar date of the transaction timestamp.
"""

from __future__ import annotations

import json
import re
from dataclasses import dataclass, field
from datetime import date, datetime, timedelta, timezone
from decimal import ROUND_HALF_EVEN, Decimal, localcontext
from fractions import Fraction
from typing import Iterable, Iterator, Mapping

SATOSHI_PER_BTC = 10**8

#: Sentinel for inputs/outputs whose address could not be decoded. Kept so
#: fee accounting stays correct, but never matched against the roster.
UNPARSEABLE = "unparseable"

#: Address patterns by kind. The P2PKH/P2SH alphabet excludes 0, O, I, l.
ADDRESS_PATTERNS: dict[str, str] = {
    "P2PKH": r"1[a-km-zA-HJ-NP-Z1-9]{25,34}",
    "P2SH": r"3[a-km-zA-HJ-NP-Z1-9]{25,34}",
    "Bech32": r"bc1[a-zA-HJ-NP-Z0-9]{25,39}",
}

_FULLMATCH = {kind: re.compile(pat + r"\Z") for kind, pat in ADDRESS_PATTERNS.items()}

WALLET_CATEGORIES = (
    "unknown",
    "exchanges",
    "pools",
    "generic",
    "mixers",
    "gambling",
    "ponzi",
    "darkweb",
)

#: Wallet categories whose addresses belong to the service itself, not to a
#: person; roster candidates in these wallets are filtered out.
SERVICE_CATEGORIES = frozenset(
    {"pools", "generic", "mixers", "gambling", "ponzi", "darkweb"}
)

GENDERS = ("male", "female", "unspecified")

_TXID_RE = re.compile(r"[0-9a-f]{64}\Z")
_COUNTRY_RE = re.compile(r"[A-Z]{2}\Z")


class DataError(ValueError):
    """Invalid or inconsistent input data."""


def address_kind(addr: str) -> str | None:
    """Return the pattern kind an address string fully matches, else None."""
    for kind, rx in _FULLMATCH.items():
        if rx.match(addr):
            return kind
    return None


# ---------------------------------------------------------------------------
# domain types


@dataclass(frozen=True)
class TxIO:
    """One transaction input or output: an address and a satoshi value."""

    addr: str
    value: int

    def __post_init__(self) -> None:
        if not isinstance(self.value, int) or self.value < 0:
            raise DataError(f"negative or non-integer value {self.value!r} for {self.addr!r}")


@dataclass(frozen=True)
class TxRecord:
    """One blockchain transaction.

    Invariants: a coinbase transaction has no inputs; otherwise the input
    sum covers the output sum and the difference is the (non-negative) fee.
    """

    txid: str
    time: datetime
    coinbase: bool
    inputs: tuple[TxIO, ...]
    outputs: tuple[TxIO, ...]

    def __post_init__(self) -> None:
        if not _TXID_RE.match(self.txid):
            raise DataError(f"txid {self.txid!r} is not 64-char lowercase hex")
        if self.time.tzinfo is None or self.time.utcoffset() != timedelta(0):
            raise DataError(f"transaction {self.txid}: time must be UTC-aware")
        if self.coinbase and self.inputs:
            raise DataError(f"coinbase transaction {self.txid} has inputs")
        if not self.coinbase and self.input_sum() < self.output_sum():
            raise DataError(
                f"transaction {self.txid}: outputs exceed inputs "
                f"({self.output_sum()} > {self.input_sum()})"
            )

    def input_sum(self) -> int:
        return sum(io.value for io in self.inputs)

    def output_sum(self) -> int:
        return sum(io.value for io in self.outputs)

    def fee(self) -> int:
        """Satoshi fee; zero for coinbase transactions."""
        if self.coinbase:
            return 0
        return self.input_sum() - self.output_sum()

    @property
    def day(self) -> date:
        """UTC calendar date of the transaction timestamp."""
        return self.time.date()

    def sort_key(self) -> tuple[datetime, str]:
        """Total order used wherever 'earlier/later' must be unambiguous."""
        return (self.time, self.txid)


@dataclass(frozen=True)
class MemberRecord:
    """A roster entry: one scheme address and its member metadata."""

    address: str
    member_id: str
    country: str = ""
    registration_date: date | None = None
    age: int | None = None
    gender: str = "unspecified"

    def __post_init__(self) -> None:
        if address_kind(self.address) is None:
            raise DataError(f"roster address {self.address!r} fails pattern validation")
        if not self.member_id:
            raise DataError(f"roster address {self.address}: empty member_id")
        if self.country and not _COUNTRY_RE.match(self.country):
            raise DataError(
                f"roster address {self.address}: country {self.country!r} "
                "is not an alpha-2 code"
            )
        if self.gender not in GENDERS:
            raise DataError(f"roster address {self.address}: bad gender {self.gender!r}")


@dataclass(frozen=True)
class WalletEntry:
    """Wallet membership and service category for one address."""

    address: str
    wallet_id: str
    category: str

    def __post_init__(self) -> None:
        if self.category not in WALLET_CATEGORIES:
            raise DataError(f"unknown wallet category {self.category!r}")


class WalletDirectory:
    """Address -> wallet lookup.

    Addresses absent from the directory are treated as singleton wallets of
    category ``unknown`` whose wallet id is the address itself.
    """

    def __init__(self, entries: Iterable[WalletEntry] = ()):
        self._by_address: dict[str, WalletEntry] = {}
        self._wallet_sizes: dict[str, int] = {}
        for entry in entries:
            if entry.address in self._by_address:
                raise DataError(f"duplicate wallet entry for address {entry.address}")
            self._by_address[entry.address] = entry
            self._wallet_sizes[entry.wallet_id] = self._wallet_sizes.get(entry.wallet_id, 0) + 1

    def __len__(self) -> int:
        return len(self._by_address)

    def lookup(self, address: str) -> WalletEntry:
        entry = self._by_address.get(address)
        if entry is None:
            return WalletEntry(address=address, wallet_id=address, category="unknown")
        return entry

    def category(self, address: str) -> str:
        return self.lookup(address).category

    def wallet_size(self, address: str) -> int:
        """Number of directory addresses sharing this address's wallet (min 1)."""
        entry = self._by_address.get(address)
        if entry is None:
            return 1
        return self._wallet_sizes[entry.wallet_id]


class PriceTable:
    """Daily USD/BTC prices. Lookup of a missing date fails loudly."""

    def __init__(self, prices: Mapping[date, Decimal]):
        for day, price in prices.items():
            if price <= 0:
                raise DataError(f"price for {day.isoformat()} is not positive: {price}")
        self._prices = dict(prices)

    def __len__(self) -> int:
        return len(self._prices)

    def __contains__(self, day: date) -> bool:
        return day in self._prices

    def lookup(self, day: date) -> Decimal:
        try:
            return self._prices[day]
        except KeyError:
            raise DataError(f"no price for {day.isoformat()}") from None


class Roster:
    """The validated set of scheme addresses plus member metadata."""

    def __init__(self, members: Iterable[MemberRecord]):
        self.members: tuple[MemberRecord, ...] = tuple(members)
        by_address: dict[str, MemberRecord] = {}
        for m in self.members:
            if m.address in by_address:
                raise DataError(f"duplicate roster address {m.address}")
            by_address[m.address] = m
        self.by_address: dict[str, MemberRecord] = by_address
        self.addresses: frozenset[str] = frozenset(by_address)

    def __len__(self) -> int:
        return len(self.members)

    def __contains__(self, address: str) -> bool:
        return address in self.by_address

    def country(self, address: str) -> str:
        member = self.by_address.get(address)
        return member.country if member else ""


# ---------------------------------------------------------------------------
# USD conversion


def to_usd(value: int | Fraction, day: date, prices: PriceTable) -> Decimal:
    """Convert a satoshi amount to USD at the day's price.

    Computed in exact decimal arithmetic, then rounded half-even to cents.
    Negative amounts are allowed (net flows are signed).
    """
    price = prices.lookup(day)
    with localcontext() as ctx:
        ctx.prec = 60
        if isinstance(value, Fraction):
            exact = (
                Decimal(value.numerator)
                / Decimal(value.denominator)
                * price
                / SATOSHI_PER_BTC
            )
        else:
            exact = Decimal(value) * price / SATOSHI_PER_BTC
        return exact.quantize(Decimal("0.01"), rounding=ROUND_HALF_EVEN)


# ---------------------------------------------------------------------------
# loaders


def _parse_time(raw: str) -> datetime:
    text = raw.strip()
    if text.endswith(("Z", "z")):
        text = text[:-1] + "+00:00"
    try:
        parsed = datetime.fromisoformat(text)
    except ValueError:
        raise DataError(f"bad timestamp {raw!r}") from None
    if parsed.tzinfo is None:
        raise DataError(f"timestamp {raw!r} has no UTC offset")
    return parsed.astimezone(timezone.utc)


def _parse_date(raw: str) -> date:
    try:
        return date.fromisoformat(raw.strip())
    except ValueError:
        raise DataError(f"bad date {raw!r}") from None


def _tx_from_obj(obj: dict) -> TxRecord:
    try:
        txid = obj["txid"]
        time = _parse_time(obj["time"])
        coinbase = bool(obj["coinbase"])
        inputs = tuple(TxIO(io["addr"], io["value"]) for io in obj["inputs"])
        outputs = tuple(TxIO(io["addr"], io["value"]) for io in obj["outputs"])
    except (KeyError, TypeError) as exc:
        raise DataError(f"malformed transaction object: {exc}") from None
    return TxRecord(txid=txid, time=time, coinbase=coinbase, inputs=inputs, outputs=outputs)


def load_transactions(path) -> list[TxRecord]:
    """Load an NDJSON transaction file, in file order.

    Rejects malformed lines (naming the line number), duplicate txids, and
    any record violating the ``TxRecord`` invariants. Blank lines are skipped.
    """
    records: list[TxRecord] = []
    seen: set[str] = set()
    with open(path, "r", encoding="utf-8") as handle:
        for lineno, line in enumerate(handle, start=1):
            if not line.strip():
                continue
            try:
                obj = json.loads(line)
            except json.JSONDecodeError as exc:
                raise DataError(f"{path}: line {lineno}: invalid JSON ({exc.msg})") from None
            try:
                record = _tx_from_obj(obj)
            except DataError as exc:
                raise DataError(f"{path}: line {lineno}: {exc}") from None
            if record.txid in seen:
                raise DataError(f"{path}: line {lineno}: duplicate txid {record.txid}")
            seen.add(record.txid)
            records.append(record)
    return records


def tx_to_obj(tx: TxRecord) -> dict:
    """JSON-serializable form of a transaction, with stable key order."""
    return {
        "txid": tx.txid,
        "time": tx.time.strftime("%Y-%m-%dT%H:%M:%SZ"),
        "coinbase": tx.coinbase,
        "inputs": [{"addr": io.addr, "value": io.value} for io in tx.inputs],
        "outputs": [{"addr": io.addr, "value": io.value} for io in tx.outputs],
    }


def dump_transactions(records: Iterable[TxRecord], path) -> None:
    """Write transactions as NDJSON (UTF-8, LF), one object per line."""
    with open(path, "w", encoding="utf-8", newline="\n") as handle:
        for tx in records:
            handle.write(json.dumps(tx_to_obj(tx), separators=(",", ":")) + "\n")


def _read_csv_rows(path, required_header: list[str]) -> Iterator[tuple[int, dict[str, str]]]:
    import csv

    with open(path, "r", encoding="utf-8", newline="") as handle:
        reader = csv.reader(handle)
        try:
            header = next(reader)
        except StopIteration:
            raise DataError(f"{path}: missing header") from None
        if [h.strip() for h in header] != required_header:
            raise DataError(
                f"{path}: expected header {','.join(required_header)}, "
                f"got {','.join(header)}"
            )
        for lineno, row in enumerate(reader, start=2):
            if not row or all(not cell.strip() for cell in row):
                continue
            if len(row) != len(required_header):
                raise DataError(f"{path}: line {lineno}: expected {len(required_header)} fields")
            yield lineno, dict(zip(required_header, (cell.strip() for cell in row)))


ROSTER_HEADER = ["address", "member_id", "country", "registration_date", "age", "gender"]


def load_roster(path) -> list[MemberRecord]:
    """Load the roster CSV; addresses must validate and be unique."""
    members: list[MemberRecord] = []
    seen: set[str] = set()
    for lineno, row in _read_csv_rows(path, ROSTER_HEADER):
        try:
            member = MemberRecord(
                address=row["address"],
                member_id=row["member_id"],
                country=row["country"],
                registration_date=_parse_date(row["registration_date"])
                if row["registration_date"]
                else None,
                age=int(row["age"]) if row["age"] else None,
                gender=row["gender"] if row["gender"] else "unspecified",
            )
        except DataError as exc:
            raise DataError(f"{path}: line {lineno}: {exc}") from None
        if member.address in seen:
            raise DataError(f"{path}: line {lineno}: duplicate address {member.address}")
        seen.add(member.address)
        members.append(member)
    return members


WALLETS_HEADER = ["address", "wallet_id", "category"]


def load_wallets(path) -> WalletDirectory:
    """Load the wallet directory CSV; unknown category strings are rejected."""
    entries = []
    for lineno, row in _read_csv_rows(path, WALLETS_HEADER):
        try:
            entries.append(WalletEntry(row["address"], row["wallet_id"], row["category"]))
        except DataError as exc:
            raise DataError(f"{path}: line {lineno}: {exc}") from None
    try:
        return WalletDirectory(entries)
    except DataError as exc:
        raise DataError(f"{path}: {exc}") from None


PRICES_HEADER = ["date", "usd_per_btc"]


def load_prices(path) -> PriceTable:
    """Load the daily price CSV (date, USD per BTC)."""
    prices: dict[date, Decimal] = {}
    for lineno, row in _read_csv_rows(path, PRICES_HEADER):
        day = _parse_date(row["date"])
        if day in prices:
            raise DataError(f"{path}: line {lineno}: duplicate date {row['date']}")
        try:
            price = Decimal(row["usd_per_btc"])
        except ArithmeticError:
            raise DataError(f"{path}: line {lineno}: bad price {row['usd_per_btc']!r}") from None
        if price <= 0:
            raise DataError(f"{path}: line {lineno}: price must be positive")
        prices[day] = price
    return PriceTable(prices)


# ---------------------------------------------------------------------------
# dataset assembly


def day_span(start: date, end: date) -> Iterator[date]:
    """All UTC dates from start to end inclusive."""
    day = start
    while day <= end:
        yield day
        day += timedelta(days=1)


def infer_day_range(days: Iterable[date], coverage: Fraction = Fraction(98, 100)) -> tuple[date, date]:
    """Smallest contiguous date window holding at least ``coverage`` of the days given.

    ``days`` carries one entry per transaction. Ties favor the earliest
    window. Mirrors the analysis-window behavior of restricting to the span
    where nearly all activity happened.
    """
    ordered = sorted(days)
    if not ordered:
        raise DataError("cannot infer a day range from zero transactions")
    total = len(ordered)
    needed = -((-coverage.numerator * total) // coverage.denominator)  # ceil
    best: tuple[int, date, date] | None = None
    lo = 0
    for hi in range(total):
        while ordered[hi] is not None and hi - lo + 1 > needed and False:
            pass
        # advance lo while the window still covers enough transactions
        while hi - lo + 1 >= needed:
            width = (ordered[hi] - ordered[lo]).days
            candidate = (width, ordered[lo], ordered[hi])
            if best is None or candidate[0] < best[0]:
                best = candidate
            lo += 1
        # keep lo so that window [lo, hi] has needed-1 elements at most
    assert best is not None
    return best[1], best[2]


@dataclass(frozen=True)
class SchemeDataset:
    """Immutable, day-indexed bundle consumed by all analysis stages.

    ``txs_by_day`` maps each date inside ``day_range`` (inclusive) that has
    activity to its typed transactions, ordered by (time, txid).
    """

    txs_by_day: Mapping[date, tuple]
    roster: Roster
    wallets: WalletDirectory
    prices: PriceTable
    day_range: tuple[date, date]
    dropped_out_of_range: int = 0

    @property
    def start(self) -> date:
        return self.day_range[0]

    @property
    def end(self) -> date:
        return self.day_range[1]

    def days(self) -> Iterator[date]:
        return day_span(self.start, self.end)

    def day_txs(self, day: date) -> tuple:
        return self.txs_by_day.get(day, ())

    def all_txs(self) -> Iterator:
        for day in self.days():
            yield from self.day_txs(day)


def build_dataset(
    typed_txs: Iterable,
    roster: Roster,
    wallets: WalletDirectory,
    prices: PriceTable,
    day_range: tuple[date, date] | None = None,
) -> SchemeDataset:
    """Assemble the immutable dataset from typed transactions.

    Transactions outside ``day_range`` are dropped and counted. When no range
    is given it is inferred as the tightest window covering >=98% of the
    typed transactions.
    """
    if len(roster) == 0:
        raise DataError("empty roster")
    typed = sorted(typed_txs, key=lambda t: t.tx.sort_key())
    if day_range is None:
        day_range = infer_day_range([t.day for t in typed])
    start, end = day_range
    if start > end:
        raise DataError(f"day range reversed: {start.isoformat()} > {end.isoformat()}")
    by_day: dict[date, list] = {}
    dropped = 0
    for t in typed:
        if t.day < start or t.day > end:
            dropped += 1
            continue
        by_day.setdefault(t.day, []).append(t)
    frozen = {day: tuple(txs) for day, txs in by_day.items()}
    return SchemeDataset(
        txs_by_day=frozen,
        roster=roster,
        wallets=wallets,
        prices=prices,
        day_range=(start, end),
        dropped_out_of_range=dropped,
    )
