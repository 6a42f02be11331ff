"""File-based ingestion of transfer streams, wallet funding edges, and address categories.

All inputs are line-delimited files (JSONL for records, CSV for the category
map).  Remote chain-data acquisition is deliberately out of scope: anything
that can yield the same record stream (an indexer export, a node crawler)
plugs in by writing the same JSONL schema.
"""

from __future__ import annotations

import json
from dataclasses import dataclass, field
from pathlib import Path
from typing import Iterable, Iterator, Optional, Union

ZERO_ADDRESS = "0x" + "0" * 40

VALID_CATEGORIES = frozenset(
    {"dex_swap", "dex_liquidity", "lending", "cex", "mixer", "other"}
)

HOUR_SECONDS = 3600

Source = Union[str, Path, Iterable[str]]


class IngestError(ValueError):
    """Raised on unrecoverable input problems (empty stream, bad schema)."""


@dataclass(frozen=True)
class Transfer:
    """One on-chain token movement. A positive ETH price makes it a trade."""

    tx_id: str
    timestamp: int
    collection: str
    token: str
    from_wallet: str
    to_wallet: str
    price_eth: float
    price_usd: float
    marketplace: str = "opensea"

    @property
    def is_trade(self) -> bool:
        return self.price_eth > 0

    @property
    def is_mint(self) -> bool:
        return self.from_wallet == ZERO_ADDRESS

    @property
    def hour(self) -> int:
        return self.timestamp // HOUR_SECONDS


@dataclass(frozen=True)
class FundingEdge:
    wallet: str
    first_funder: str
    funded_at: int


@dataclass(frozen=True)
class WalletTx:
    """One generic blockchain transaction of a wallet (NFT-unrelated included)."""

    wallet: str
    timestamp: int
    counterparty: str
    value_eth: float
    kind: str  # "transfer" | "contract_call"


@dataclass
class Diagnostics:
    """Counts and messages for skipped or repaired input lines."""

    rejected: int = 0
    warnings: int = 0
    messages: list[str] = field(default_factory=list)

    def reject(self, msg: str) -> None:
        self.rejected += 1
        self.messages.append(msg)

    def warn(self, msg: str) -> None:
        self.warnings += 1
        self.messages.append(msg)


def _sort_key(t: Transfer) -> tuple:
    return (t.timestamp, t.tx_id, t.token)


def _canonical_key(t: Transfer) -> tuple:
    # Full-record ordering so duplicate resolution is input-order independent.
    return (
        t.timestamp,
        t.tx_id,
        t.token,
        t.collection,
        t.from_wallet,
        t.to_wallet,
        t.price_eth,
        t.price_usd,
        t.marketplace,
    )


class TransferLog:
    """Validated, deduplicated, (timestamp, tx_id, token)-sorted transfer records.

    Immutable after construction; safe to share across threads.
    """

    def __init__(self, transfers: list[Transfer], diagnostics: Optional[Diagnostics] = None):
        self.transfers: list[Transfer] = sorted(transfers, key=_sort_key)
        self.diagnostics = diagnostics or Diagnostics()
        self._by_collection: Optional[dict[str, list[Transfer]]] = None

    def __len__(self) -> int:
        return len(self.transfers)

    def __iter__(self) -> Iterator[Transfer]:
        return iter(self.transfers)

    def __eq__(self, other) -> bool:
        return isinstance(other, TransferLog) and self.transfers == other.transfers

    def collections(self) -> list[str]:
        return sorted(self.by_collection())

    def by_collection(self) -> dict[str, list[Transfer]]:
        if self._by_collection is None:
            out: dict[str, list[Transfer]] = {}
            for t in self.transfers:
                out.setdefault(t.collection, []).append(t)
            self._by_collection = out
        return self._by_collection

    def trades(self) -> Iterator[Transfer]:
        return (t for t in self.transfers if t.is_trade)


def _iter_lines(source: Source) -> Iterator[str]:
    if isinstance(source, (str, Path)):
        with open(source, "r", encoding="utf-8") as fh:
            yield from fh
    else:
        yield from source


def _parse_transfer_obj(obj: dict) -> Transfer:
    ts = obj["ts"]
    if not isinstance(ts, (int, float)) or isinstance(ts, bool) or ts <= 0:
        raise ValueError("timestamp must be a positive number")
    price_eth = float(obj["price_eth"])
    price_usd = float(obj.get("price_usd", 0.0))
    if price_eth < 0 or price_usd < 0:
        raise ValueError("negative price")
    return Transfer(
        tx_id=str(obj["tx_id"]),
        timestamp=int(ts),
        collection=str(obj["collection"]),
        token=str(obj["token"]),
        from_wallet=str(obj["from"]),
        to_wallet=str(obj["to"]),
        price_eth=price_eth,
        price_usd=price_usd,
        marketplace=str(obj.get("market", "opensea")),
    )


def parse_transfers(source: Source) -> TransferLog:
    """Parse a JSONL transfer stream into a validated TransferLog.

    Malformed lines are skipped with a line-numbered diagnostic.  Duplicate
    (tx_id, token) pairs collapse to one record; the survivor is the
    smallest record under a full-field ordering, which makes the result
    independent of input line order.
    """
    diag = Diagnostics()
    by_key: dict[tuple[str, str], Transfer] = {}
    for lineno, line in enumerate(_iter_lines(source), start=1):
        line = line.strip()
        if not line:
            continue
        try:
            obj = json.loads(line)
            rec = _parse_transfer_obj(obj)
        except (ValueError, KeyError, TypeError) as exc:
            diag.reject(f"line {lineno}: rejected ({exc})")
            continue
        key = (rec.tx_id, rec.token)
        prev = by_key.get(key)
        if prev is None:
            by_key[key] = rec
        else:
            if _canonical_key(rec) < _canonical_key(prev):
                by_key[key] = rec
            diag.warn(f"line {lineno}: duplicate (tx_id={rec.tx_id}, token={rec.token}) collapsed")
    return TransferLog(list(by_key.values()), diag)


def serialize_transfers(log: TransferLog) -> Iterator[str]:
    """Yield the JSONL lines for a TransferLog (inverse of parse_transfers)."""
    for t in log:
        yield json.dumps(
            {
                "tx_id": t.tx_id,
                "ts": t.timestamp,
                "collection": t.collection,
                "token": t.token,
                "from": t.from_wallet,
                "to": t.to_wallet,
                "price_eth": t.price_eth,
                "price_usd": t.price_usd,
                "market": t.marketplace,
            },
            sort_keys=True,
        )


class FundingIndex:
    """wallet -> first funder lookup; absent wallets resolve to None."""

    def __init__(self, edges: dict[str, FundingEdge], diagnostics: Optional[Diagnostics] = None):
        self._edges = edges
        self.diagnostics = diagnostics or Diagnostics()

    def __len__(self) -> int:
        return len(self._edges)

    def first_funder(self, wallet: str) -> Optional[str]:
        edge = self._edges.get(wallet)
        return edge.first_funder if edge is not None else None

    def edges(self) -> list[FundingEdge]:
        return [self._edges[w] for w in sorted(self._edges)]


def load_funding_graph(source: Source) -> FundingIndex:
    """Load FundingEdge JSONL; on conflicting edges for a wallet keep the earliest."""
    diag = Diagnostics()
    edges: dict[str, FundingEdge] = {}
    for lineno, line in enumerate(_iter_lines(source), start=1):
        line = line.strip()
        if not line:
            continue
        try:
            obj = json.loads(line)
            edge = FundingEdge(
                wallet=str(obj["wallet"]),
                first_funder=str(obj["first_funder"]),
                funded_at=int(obj["funded_at"]),
            )
        except (ValueError, KeyError, TypeError) as exc:
            diag.reject(f"line {lineno}: rejected ({exc})")
            continue
        prev = edges.get(edge.wallet)
        if prev is None:
            edges[edge.wallet] = edge
        else:
            # Keep the earliest funding event; ties broken by funder id.
            if (edge.funded_at, edge.first_funder) < (prev.funded_at, prev.first_funder):
                edges[edge.wallet] = edge
            diag.warn(f"line {lineno}: duplicate funding edge for {edge.wallet}, kept earliest")
    return FundingIndex(edges, diag)


def serialize_funding(index: FundingIndex) -> Iterator[str]:
    for e in index.edges():
        yield json.dumps(
            {"wallet": e.wallet, "first_funder": e.first_funder, "funded_at": e.funded_at},
            sort_keys=True,
        )


class CategoryMap:
    """address -> category; categories restricted to VALID_CATEGORIES."""

    def __init__(self, entries: dict[str, str], diagnostics: Optional[Diagnostics] = None):
        self._entries = entries
        self.diagnostics = diagnostics or Diagnostics()

    def __len__(self) -> int:
        return len(self._entries)

    def category(self, address: str) -> Optional[str]:
        return self._entries.get(address)

    def addresses_in(self, *categories: str) -> set[str]:
        wanted = set(categories)
        return {a for a, c in self._entries.items() if c in wanted}

    def exclusion_set(self) -> set[str]:
        """Addresses excluded from the common-funder wash filter (cex + mixer)."""
        return self.addresses_in("cex", "mixer")

    def items(self) -> list[tuple[str, str]]:
        return sorted(self._entries.items())


def load_categories(source: Source) -> CategoryMap:
    """Load the address,category CSV. Unknown categories reject the line; on
    duplicate addresses the first occurrence wins."""
    diag = Diagnostics()
    entries: dict[str, str] = {}
    for lineno, line in enumerate(_iter_lines(source), start=1):
        line = line.strip()
        if not line:
            continue
        if lineno == 1 and line.lower() == "address,category":
            continue
        parts = line.split(",")
        if len(parts) != 2:
            diag.reject(f"line {lineno}: expected 'address,category'")
            continue
        address, category = parts[0].strip(), parts[1].strip()
        if category not in VALID_CATEGORIES:
            diag.reject(f"line {lineno}: unknown category {category!r}")
            continue
        if address in entries:
            if entries[address] != category:
                diag.warn(f"line {lineno}: conflicting category for {address}, first wins")
            continue
        entries[address] = category
    return CategoryMap(entries, diag)


def parse_wallet_txs(source: Source) -> list[WalletTx]:
    """Parse the wallet transaction JSONL used for agent enrichment.

    Schema per line: wallet, ts, counterparty, value_eth, kind.
    """
    out: list[WalletTx] = []
    for lineno, line in enumerate(_iter_lines(source), start=1):
        line = line.strip()
        if not line:
            continue
        try:
            obj = json.loads(line)
            kind = str(obj.get("kind", "transfer"))
            if kind not in ("transfer", "contract_call"):
                raise ValueError(f"unknown kind {kind!r}")
            out.append(
                WalletTx(
                    wallet=str(obj["wallet"]),
                    timestamp=int(obj["ts"]),
                    counterparty=str(obj["counterparty"]),
                    value_eth=float(obj.get("value_eth", 0.0)),
                    kind=kind,
                )
            )
        except (ValueError, KeyError, TypeError) as exc:
            raise IngestError(f"wallet tx line {lineno}: {exc}") from exc
    out.sort(key=lambda t: (t.wallet, t.timestamp, t.counterparty))
    return out


def serialize_wallet_txs(txs: list[WalletTx]) -> Iterator[str]:
    for t in txs:
        yield json.dumps(
            {
                "wallet": t.wallet,
                "ts": t.timestamp,
                "counterparty": t.counterparty,
                "value_eth": t.value_eth,
                "kind": t.kind,
            },
            sort_keys=True,
        )
