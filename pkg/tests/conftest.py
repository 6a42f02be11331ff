import json

import numpy as np
import pytest

from bubblescope.ingest import ZERO_ADDRESS, Transfer, TransferLog
from bubblescope.synth import SynthConfig, generate_market

H0 = 500_000  # arbitrary absolute hour base for hand-built fixtures


def tr(
    tx="t1",
    ts=None,
    hour=None,
    coll="C",
    token="k1",
    frm="A",
    to="B",
    eth=1.0,
    usd=None,
):
    """Shorthand Transfer constructor for hand-built scenarios."""
    if ts is None:
        ts = (H0 + (hour or 0)) * 3600 + 10
    return Transfer(
        tx_id=tx,
        timestamp=ts,
        collection=coll,
        token=token,
        from_wallet=frm,
        to_wallet=to,
        price_eth=eth,
        price_usd=usd if usd is not None else eth * 1900.0,
    )


def mint(tx, hour, coll, token, to, ts_offset=0):
    return tr(tx=tx, ts=(H0 + hour) * 3600 + ts_offset, coll=coll, token=token, frm=ZERO_ADDRESS, to=to, eth=0.0)


def jsonl_line(t: Transfer) -> str:
    return json.dumps(
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
        }
    )


def flat_price_log(hours=60, price=1.0, coll="C", jump_at=None, jump_factor=2.1):
    """One trade per hour at a constant price, with an optional one-hour jump."""
    transfers = [mint("m0", 0, coll, "tok-seed", "HOLDER0")]
    for h in range(hours):
        p = price * (jump_factor if jump_at is not None and h == jump_at else 1.0)
        transfers.append(
            tr(tx=f"b{h:04d}", hour=h, coll=coll, token=f"tok{h}", frm="S", to=f"B{h}", eth=p)
        )
        transfers.append(mint(f"m{h+1:04d}", h, coll, f"tok{h}", "S", ts_offset=5))
    return TransferLog(transfers)


@pytest.fixture(scope="session")
def small_market():
    return generate_market(SynthConfig(seed=42))


@pytest.fixture(scope="session")
def tiny_market():
    cfg = SynthConfig(
        seed=11,
        n_collections=3,
        n_wallets=12_000,
        horizon_hours=700,
        runup_rate=5.0,
        supply=120,
        sophisticated_share=0.0,
        planted_effects={},
        wash_loop_count=0,
        burn_in_events=0,
    )
    return generate_market(cfg)


def rng(seed=0):
    return np.random.default_rng(seed)
