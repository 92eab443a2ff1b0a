"""Transaction ingestion, normalization, and replay.

Parses the 11-column transaction CSV into normalized records, converts
amounts to USD through a configurable rate table, and seals records into
an immutable, timestamp-ordered store with a per-account index.
"""

from __future__ import annotations

import calendar
import csv
import io
import struct
from collections import Counter
from dataclasses import dataclass, field
from datetime import datetime, timezone
from decimal import Decimal, InvalidOperation, ROUND_HALF_UP
from enum import Enum
from pathlib import Path
from typing import BinaryIO, Iterable, Iterator, NamedTuple

MAGIC = b"CRPTXS\x00\x01"  # 8-byte format/version tag

CURRENCIES = (
    "Australian Dollar",
    "Bitcoin",
    "Brazil Real",
    "Canadian Dollar",
    "Euro",
    "Mexican Peso",
    "Ruble",
    "Rupee",
    "Saudi Riyal",
    "Shekel",
    "Swiss Franc",
    "UK Pound",
    "US Dollar",
    "Yen",
    "Yuan",
)

_FIAT_QUANT = Decimal("0.01")
_BTC_QUANT = Decimal("0.00000001")


class PaymentFormat(str, Enum):
    CHEQUE = "Cheque"
    CREDIT_CARD = "Credit Card"
    ACH = "ACH"
    CASH = "Cash"
    WIRE = "Wire"
    BITCOIN = "Bitcoin"
    REINVESTMENT = "Reinvestment"


def _normalize_token(name: str) -> str:
    return "".join(ch for ch in name.lower() if ch.isalnum())


_CURRENCY_BY_TOKEN = {_normalize_token(c): c for c in CURRENCIES}
_FORMAT_BY_TOKEN = {_normalize_token(f.value): f for f in PaymentFormat}


def canonical_currency(name: str) -> str | None:
    return _CURRENCY_BY_TOKEN.get(_normalize_token(name))


def canonical_format(name: str) -> PaymentFormat | None:
    return _FORMAT_BY_TOKEN.get(_normalize_token(name))


class SchemaError(ValueError):
    """CSV header does not provide a required column."""


class RateLookupError(KeyError):
    """Currency missing from the rate table."""


class OrderingError(ValueError):
    """Records presented out of timestamp order where order is required."""


class StoreFormatError(ValueError):
    """Persisted store bytes do not match the expected format."""


class AccountId(NamedTuple):
    """Account identity; ids repeat across banks, so the bank is part of it."""

    bank: str
    account: str

    def token(self) -> str:
        return f"{self.bank}/{self.account}"


@dataclass(frozen=True)
class TransactionRecord:
    timestamp: int  # seconds since epoch, UTC
    from_bank: str
    from_account: str
    to_bank: str
    to_account: str
    amount_received: Decimal
    receiving_currency: str
    amount_paid: Decimal
    payment_currency: str
    payment_format: PaymentFormat
    is_laundering: bool

    @property
    def sender(self) -> AccountId:
        return AccountId(self.from_bank, self.from_account)

    @property
    def receiver(self) -> AccountId:
        return AccountId(self.to_bank, self.to_account)

    def to_csv_row(self) -> list[str]:
        return [
            format_timestamp(self.timestamp),
            self.from_bank,
            self.from_account,
            self.to_bank,
            self.to_account,
            str(self.amount_received),
            self.receiving_currency,
            str(self.amount_paid),
            self.payment_currency,
            self.payment_format.value,
            "1" if self.is_laundering else "0",
        ]


CSV_HEADER = [
    "Timestamp",
    "From Bank",
    "Account",
    "To Bank",
    "Account",
    "Amount Received",
    "Receiving Currency",
    "Amount Paid",
    "Payment Currency",
    "Payment Format",
    "Is Laundering",
]


@dataclass
class ParseReport:
    rows_read: int = 0
    rows_accepted: int = 0
    rows_rejected: int = 0
    reject_reasons: Counter = field(default_factory=Counter)

    def reject(self, reason: str) -> None:
        self.rows_rejected += 1
        self.reject_reasons[reason] += 1


class RateTable:
    """USD-per-unit conversion rates, exact decimal arithmetic."""

    def __init__(self, rates: dict[str, Decimal | str | float]):
        self.rates: dict[str, Decimal] = {}
        for code, rate in rates.items():
            canonical = canonical_currency(code)
            if canonical is None:
                raise ValueError(f"unknown currency in rate table: {code!r}")
            value = Decimal(str(rate))
            if value <= 0:
                raise ValueError(f"rate for {canonical} must be positive, got {value}")
            self.rates[canonical] = value
        if self.rates.get("US Dollar") != Decimal("1"):
            raise ValueError("rate table must map US Dollar to 1.0")

    def __contains__(self, currency: str) -> bool:
        return currency in self.rates

    def rate(self, currency: str) -> Decimal:
        try:
            return self.rates[currency]
        except KeyError:
            raise RateLookupError(currency) from None

    @classmethod
    def from_file(cls, path: str | Path) -> "RateTable":
        rates: dict[str, str] = {}
        for line in Path(path).read_text(encoding="utf-8").splitlines():
            line = line.strip()
            if not line or line.startswith("#"):
                continue
            if "=" not in line:
                raise ValueError(f"rate table line is not key=value: {line!r}")
            key, _, value = line.partition("=")
            rates[key.strip()] = value.strip()
        return cls(rates)

    def to_file(self, path: str | Path) -> None:
        lines = [f"{code}={rate}" for code, rate in sorted(self.rates.items())]
        Path(path).write_text("\n".join(lines) + "\n", encoding="utf-8")


#: Plausible static rates; the source data never states conversion rates.
DEFAULT_RATES = RateTable(
    {
        "Australian Dollar": "0.66",
        "Bitcoin": "43000",
        "Brazil Real": "0.20",
        "Canadian Dollar": "0.74",
        "Euro": "1.08",
        "Mexican Peso": "0.058",
        "Ruble": "0.011",
        "Rupee": "0.012",
        "Saudi Riyal": "0.27",
        "Shekel": "0.27",
        "Swiss Franc": "1.12",
        "UK Pound": "1.25",
        "US Dollar": "1",
        "Yen": "0.0070",
        "Yuan": "0.14",
    }
)


def to_usd(amount: Decimal, currency: str, rate_table: RateTable) -> Decimal:
    """Convert an amount to USD: amount x rate, exact in decimal arithmetic."""
    return amount * rate_table.rate(currency)


def parse_timestamp(text: str) -> int:
    """Accepts YYYY/MM/DD HH:MM[:SS] or integer seconds since epoch."""
    text = text.strip()
    for fmt in ("%Y/%m/%d %H:%M", "%Y/%m/%d %H:%M:%S"):
        try:
            return calendar.timegm(datetime.strptime(text, fmt).timetuple())
        except ValueError:
            pass
    return int(text)


def format_timestamp(ts: int) -> str:
    dt = datetime.fromtimestamp(ts, tz=timezone.utc)
    fmt = "%Y/%m/%d %H:%M" if ts % 60 == 0 else "%Y/%m/%d %H:%M:%S"
    return dt.strftime(fmt)


def _parse_amount(text: str, currency: str) -> Decimal:
    value = Decimal(text.strip())
    if not value.is_finite() or value <= 0:
        raise InvalidOperation(text)
    quant = _BTC_QUANT if currency == "Bitcoin" else _FIAT_QUANT
    return value.quantize(quant, rounding=ROUND_HALF_UP)


_REQUIRED = (
    "timestamp",
    "from_bank",
    "from_account",
    "to_bank",
    "to_account",
    "amount_received",
    "receiving_currency",
    "amount_paid",
    "payment_currency",
    "payment_format",
    "is_laundering",
)

_HEADER_ALIASES = {
    "timestamp": ("timestamp",),
    "from_bank": ("frombank",),
    "to_bank": ("tobank",),
    "amount_received": ("amountreceived",),
    "receiving_currency": ("receivingcurrency",),
    "amount_paid": ("amountpaid",),
    "payment_currency": ("paymentcurrency",),
    "payment_format": ("paymentformat",),
    "is_laundering": ("islaundering",),
}


def _resolve_columns(header: list[str]) -> dict[str, int]:
    """Map canonical column names to indices, case/punctuation-insensitive.

    The source schema names both account columns just "Account" (the second
    sometimes arrives as "Account.1"); they are disambiguated by position.
    """
    tokens = [_normalize_token(h) for h in header]
    columns: dict[str, int] = {}
    for name, aliases in _HEADER_ALIASES.items():
        for alias in aliases:
            if alias in tokens:
                columns[name] = tokens.index(alias)
                break
    account_positions = [i for i, t in enumerate(tokens) if t in ("account", "fromaccount")]
    if account_positions:
        columns["from_account"] = account_positions[0]
    for candidate in ("toaccount", "account1"):
        if candidate in tokens:
            columns["to_account"] = tokens.index(candidate)
            break
    else:
        bare = [i for i, t in enumerate(tokens) if t == "account"]
        if len(bare) >= 2:
            columns["to_account"] = bare[1]
    for name in _REQUIRED:
        if name not in columns:
            raise SchemaError(f"missing required column: {name}")
    return columns


_TRUE_LABELS = {"1", "true", "yes"}
_FALSE_LABELS = {"0", "false", "no", ""}


def _parse_row(row: list[str], cols: dict[str, int], rate_table: RateTable) -> tuple[TransactionRecord | None, str | None]:
    def cell(name: str) -> str:
        idx = cols[name]
        if idx >= len(row):
            raise IndexError(name)
        return row[idx].strip()

    try:
        timestamp = parse_timestamp(cell("timestamp"))
    except (ValueError, IndexError):
        return None, "bad-timestamp"

    try:
        from_bank, from_account = cell("from_bank"), cell("from_account")
        to_bank, to_account = cell("to_bank"), cell("to_account")
    except IndexError:
        return None, "short-row"
    if not all((from_bank, from_account, to_bank, to_account)):
        return None, "missing-field"

    recv_ccy = canonical_currency(cell("receiving_currency"))
    pay_ccy = canonical_currency(cell("payment_currency"))
    if recv_ccy is None or pay_ccy is None:
        return None, "bad-currency"
    if recv_ccy not in rate_table or pay_ccy not in rate_table:
        return None, "bad-currency"

    fmt = canonical_format(cell("payment_format"))
    if fmt is None:
        return None, "bad-format"

    try:
        amount_received = _parse_amount(cell("amount_received"), recv_ccy)
        amount_paid = _parse_amount(cell("amount_paid"), pay_ccy)
    except (InvalidOperation, ValueError):
        return None, "bad-amount"

    label_text = cell("is_laundering").lower()
    if label_text in _TRUE_LABELS:
        label = True
    elif label_text in _FALSE_LABELS:
        label = False
    else:
        return None, "bad-label"

    return (
        TransactionRecord(
            timestamp=timestamp,
            from_bank=from_bank,
            from_account=from_account,
            to_bank=to_bank,
            to_account=to_account,
            amount_received=amount_received,
            receiving_currency=recv_ccy,
            amount_paid=amount_paid,
            payment_currency=pay_ccy,
            payment_format=fmt,
            is_laundering=label,
        ),
        None,
    )


def parse_transactions(
    byte_stream: bytes | BinaryIO, rate_table: RateTable
) -> tuple[list[TransactionRecord], ParseReport]:
    """Parse the 11-column CSV into timestamp-ordered records.

    Unparsable rows are skipped and counted in the report, never silently
    dropped; a missing header column raises :class:`SchemaError` naming it.
    """
    if isinstance(byte_stream, bytes):
        byte_stream = io.BytesIO(byte_stream)
    text = io.TextIOWrapper(byte_stream, encoding="utf-8", newline="")
    reader = csv.reader(text)
    try:
        header = next(reader)
    except StopIteration:
        raise SchemaError("missing required column: timestamp (empty file)") from None
    cols = _resolve_columns(header)

    report = ParseReport()
    records: list[TransactionRecord] = []
    for row in reader:
        if not row or all(not c.strip() for c in row):
            continue
        report.rows_read += 1
        record, reason = _parse_row(row, cols, rate_table)
        if record is None:
            report.reject(reason or "unparsable")
        else:
            report.rows_accepted += 1
            records.append(record)
    records.sort(key=lambda r: r.timestamp)  # stable: ties keep file order
    return records, report


class TransactionStore:
    """Append-only, timestamp-ordered record sequence with an account index.

    Built once by a single writer, then sealed; readers are thereafter safe
    to share it across threads.
    """

    def __init__(self, records: Iterable[TransactionRecord] = (), meta: str = ""):
        self.records: list[TransactionRecord] = []
        self.meta = meta
        self._index: dict[AccountId, list[int]] = {}
        self._sealed = False
        for record in records:
            self.append(record)
        if self.records:
            self.seal()

    def append(self, record: TransactionRecord) -> None:
        if self._sealed:
            raise OrderingError("store is sealed; no appends after sealing")
        if self.records and record.timestamp < self.records[-1].timestamp:
            raise OrderingError(
                f"timestamp {record.timestamp} precedes {self.records[-1].timestamp}"
            )
        position = len(self.records)
        self.records.append(record)
        for account in (record.sender, record.receiver):
            self._index.setdefault(account, []).append(position)
        # self-transfer: avoid double-indexing the same position
        if record.sender == record.receiver:
            self._index[record.sender].pop()

    def seal(self) -> None:
        self._sealed = True

    def __len__(self) -> int:
        return len(self.records)

    def __iter__(self) -> Iterator[TransactionRecord]:
        return iter(self.records)

    def accounts(self) -> list[AccountId]:
        return list(self._index.keys())

    def scan_account(
        self, account_id: AccountId, until_timestamp: int | None = None
    ) -> list[TransactionRecord]:
        """Records where the account is sender or receiver, strictly before
        ``until_timestamp`` (unbounded when None), in timestamp order."""
        positions = self._index.get(account_id, ())
        out = []
        for pos in positions:
            record = self.records[pos]
            if until_timestamp is not None and record.timestamp >= until_timestamp:
                break
            out.append(record)
        return out

    # --- persistence -----------------------------------------------------

    def save(self, path: str | Path) -> None:
        with open(path, "wb") as fh:
            fh.write(MAGIC)
            _write_str(fh, self.meta)
            fh.write(struct.pack("<Q", len(self.records)))
            for r in self.records:
                fh.write(struct.pack("<q", r.timestamp))
                for text in (r.from_bank, r.from_account, r.to_bank, r.to_account):
                    _write_str(fh, text)
                _write_str(fh, str(r.amount_received))
                fh.write(struct.pack("<B", CURRENCIES.index(r.receiving_currency)))
                _write_str(fh, str(r.amount_paid))
                fh.write(struct.pack("<B", CURRENCIES.index(r.payment_currency)))
                fh.write(struct.pack("<B", _FORMAT_ORDER.index(r.payment_format)))
                fh.write(struct.pack("<B", 1 if r.is_laundering else 0))

    @classmethod
    def load(cls, path: str | Path) -> "TransactionStore":
        with open(path, "rb") as fh:
            magic = fh.read(8)
            if magic != MAGIC:
                raise StoreFormatError(f"bad store magic: {magic!r}")
            meta = _read_str(fh)
            (count,) = struct.unpack("<Q", fh.read(8))
            records = []
            for _ in range(count):
                (timestamp,) = struct.unpack("<q", fh.read(8))
                from_bank = _read_str(fh)
                from_account = _read_str(fh)
                to_bank = _read_str(fh)
                to_account = _read_str(fh)
                amount_received = Decimal(_read_str(fh))
                recv_ccy = CURRENCIES[fh.read(1)[0]]
                amount_paid = Decimal(_read_str(fh))
                pay_ccy = CURRENCIES[fh.read(1)[0]]
                fmt = _FORMAT_ORDER[fh.read(1)[0]]
                label = fh.read(1)[0] == 1
                records.append(
                    TransactionRecord(
                        timestamp, from_bank, from_account, to_bank, to_account,
                        amount_received, recv_ccy, amount_paid, pay_ccy, fmt, label,
                    )
                )
        return cls(records, meta=meta)


_FORMAT_ORDER = tuple(PaymentFormat)


def _write_str(fh: BinaryIO, text: str) -> None:
    data = text.encode("utf-8")
    fh.write(struct.pack("<H", len(data)))
    fh.write(data)


def _read_str(fh: BinaryIO) -> str:
    (length,) = struct.unpack("<H", fh.read(2))
    return fh.read(length).decode("utf-8")


def write_csv(records: Iterable[TransactionRecord], path: str | Path) -> None:
    with open(path, "w", encoding="utf-8", newline="") as fh:
        writer = csv.writer(fh)
        writer.writerow(CSV_HEADER)
        for record in records:
            writer.writerow(record.to_csv_row())


def load_csv(path: str | Path, rate_table: RateTable) -> tuple[TransactionStore, ParseReport]:
    with open(path, "rb") as fh:
        records, report = parse_transactions(fh, rate_table)
    return TransactionStore(records), report
