"""Tamper-evident signed hash chain for federated-round artifacts.

Blocks are canonically serialized (length-prefixed, little-endian) and
linked by SHA-256; transactions and block headers carry Ed25519
signatures. Proposers are drawn by stake-weighted sampling. No forks or
reorgs: one designated proposer appends per block.
"""

from __future__ import annotations

import hashlib
import struct
from dataclasses import dataclass
from enum import IntEnum

import numpy as np
from cryptography.exceptions import InvalidSignature
from cryptography.hazmat.primitives import serialization
from cryptography.hazmat.primitives.asymmetric.ed25519 import (
    Ed25519PrivateKey,
    Ed25519PublicKey,
)

CHAIN_LOG_MAGIC = b"BFELCHN1"
HASH_BYTES = 32


class InvalidTransactionError(ValueError):
    """A transaction offered for packaging fails signature verification."""

    def __init__(self, index: int):
        super().__init__(f"transaction {index} has an invalid signature")
        self.index = index


class ChainFormatError(ValueError):
    """A serialized chain failed to parse."""

    def __init__(self, block_index: int, reason: str):
        super().__init__(f"block {block_index}: {reason}")
        self.block_index = block_index


class StakeError(ValueError):
    pass


# --- canonical little-endian serialization helpers ---


def _u8(v: int) -> bytes:
    return struct.pack("<B", v)


def _u32(v: int) -> bytes:
    return struct.pack("<I", v)


def _u64(v: int) -> bytes:
    return struct.pack("<Q", v)


def _lp(b: bytes) -> bytes:
    return _u32(len(b)) + b


class _Reader:
    def __init__(self, buf: bytes):
        self.buf = buf
        self.pos = 0

    def take(self, n: int) -> bytes:
        if self.pos + n > len(self.buf):
            raise ValueError("truncated")
        out = self.buf[self.pos : self.pos + n]
        self.pos += n
        return out

    def u8(self) -> int:
        return struct.unpack("<B", self.take(1))[0]

    def u32(self) -> int:
        return struct.unpack("<I", self.take(4))[0]

    def u64(self) -> int:
        return struct.unpack("<Q", self.take(8))[0]

    def lp(self) -> bytes:
        return self.take(self.u32())

    def done(self) -> bool:
        return self.pos == len(self.buf)


# --- keys and signatures ---


@dataclass(frozen=True)
class KeyPair:
    secret: bytes
    public: bytes
    scheme: str = "ed25519"


def keygen(seed: int) -> KeyPair:
    """Deterministic Ed25519 keypair derived from an integer seed."""
    sk_bytes = hashlib.sha256(
        b"bfel-keygen-v1" + seed.to_bytes(16, "little", signed=True)
    ).digest()
    sk = Ed25519PrivateKey.from_private_bytes(sk_bytes)
    pk = sk.public_key().public_bytes(
        serialization.Encoding.Raw, serialization.PublicFormat.Raw
    )
    return KeyPair(secret=sk_bytes, public=pk)


def sign(secret: bytes, message: bytes) -> bytes:
    return Ed25519PrivateKey.from_private_bytes(secret).sign(message)


def verify(public: bytes, message: bytes, signature: bytes) -> bool:
    try:
        Ed25519PublicKey.from_public_bytes(public).verify(signature, message)
        return True
    except (InvalidSignature, ValueError):
        return False


# --- transactions ---


class TxKind(IntEnum):
    CLIENT_UPDATE = 1
    GLOBAL_MODEL = 2
    POLICY = 3


@dataclass(frozen=True)
class SignedTransaction:
    kind: TxKind
    payload_digest: bytes  # 32-byte hash of the serialized payload
    sender_public: bytes
    signature: bytes
    timestamp: int  # milliseconds (simulated clock)

    def signed_payload(self) -> bytes:
        return (
            _u8(int(self.kind))
            + _u64(self.timestamp)
            + _lp(self.payload_digest)
        )

    def verified(self) -> bool:
        return verify(self.sender_public, self.signed_payload(), self.signature)

    def to_bytes(self) -> bytes:
        return (
            self.signed_payload()
            + _lp(self.sender_public)
            + _lp(self.signature)
        )


def make_transaction(
    kind: TxKind, payload_digest: bytes, sender: KeyPair, timestamp: int
) -> SignedTransaction:
    body = _u8(int(kind)) + _u64(timestamp) + _lp(payload_digest)
    return SignedTransaction(
        kind=kind,
        payload_digest=payload_digest,
        sender_public=sender.public,
        signature=sign(sender.secret, body),
        timestamp=timestamp,
    )


def _parse_transaction(r: _Reader) -> SignedTransaction:
    kind = TxKind(r.u8())
    timestamp = r.u64()
    digest = r.lp()
    public = r.lp()
    signature = r.lp()
    return SignedTransaction(kind, digest, public, signature, timestamp)


# --- blocks and chains ---


@dataclass(frozen=True)
class Block:
    index: int
    previous_hash: bytes
    transactions: tuple[SignedTransaction, ...]
    proposer_public: bytes
    proposer_signature: bytes
    timestamp: int

    def header_bytes(self) -> bytes:
        out = (
            _u64(self.index)
            + _lp(self.previous_hash)
            + _u64(self.timestamp)
            + _u32(len(self.transactions))
        )
        for tx in self.transactions:
            out += tx.to_bytes()
        out += _lp(self.proposer_public)
        return out

    def to_bytes(self) -> bytes:
        return self.header_bytes() + _lp(self.proposer_signature)

    def hash(self) -> bytes:
        return hashlib.sha256(self.to_bytes()).digest()


def _parse_block(buf: bytes) -> Block:
    r = _Reader(buf)
    index = r.u64()
    previous_hash = r.lp()
    timestamp = r.u64()
    txs = tuple(_parse_transaction(r) for _ in range(r.u32()))
    proposer_public = r.lp()
    proposer_signature = r.lp()
    if not r.done():
        raise ValueError("trailing bytes after block")
    return Block(index, previous_hash, txs, proposer_public, proposer_signature, timestamp)


GENESIS = Block(
    index=0,
    previous_hash=b"\x00" * HASH_BYTES,
    transactions=(),
    proposer_public=b"",
    proposer_signature=b"",
    timestamp=0,
)
GENESIS_HASH = GENESIS.hash()


@dataclass(frozen=True)
class Chain:
    blocks: tuple[Block, ...]

    def tip(self) -> Block:
        return self.blocks[-1]

    def __len__(self) -> int:
        return len(self.blocks)


def new_chain() -> Chain:
    return Chain((GENESIS,))


def append_block(
    chain: Chain,
    transactions: list[SignedTransaction],
    proposer: KeyPair,
    timestamp: int,
) -> Chain:
    """Return a new chain extended by one proposer-signed block."""
    for i, tx in enumerate(transactions):
        if not tx.verified():
            raise InvalidTransactionError(i)
    block = Block(
        index=len(chain.blocks),
        previous_hash=chain.tip().hash(),
        transactions=tuple(transactions),
        proposer_public=proposer.public,
        proposer_signature=b"",
        timestamp=timestamp,
    )
    signed = Block(
        block.index,
        block.previous_hash,
        block.transactions,
        block.proposer_public,
        sign(proposer.secret, block.header_bytes()),
        block.timestamp,
    )
    return Chain(chain.blocks + (signed,))


def validate_chain(chain: Chain) -> tuple[bool, int | None]:
    """True iff all hash links and signatures hold; else earliest bad index."""
    if not chain.blocks or chain.blocks[0].to_bytes() != GENESIS.to_bytes():
        return False, 0
    prev_hash = GENESIS_HASH
    for pos, block in enumerate(chain.blocks[1:], start=1):
        if block.index != pos:
            return False, pos
        if block.previous_hash != prev_hash:
            return False, pos
        for tx in block.transactions:
            if not tx.verified():
                return False, pos
        if not verify(
            block.proposer_public, block.header_bytes(), block.proposer_signature
        ):
            return False, pos
        prev_hash = block.hash()
    return True, None


def export_chain(chain: Chain) -> bytes:
    """Length-prefixed binary log of canonical block serializations."""
    out = CHAIN_LOG_MAGIC + _u32(len(chain.blocks))
    for block in chain.blocks:
        out += _lp(block.to_bytes())
    return out


def import_chain(blob: bytes) -> Chain:
    r = _Reader(blob)
    try:
        if r.take(8) != CHAIN_LOG_MAGIC:
            raise ChainFormatError(0, "bad magic")
        count = r.u32()
    except ValueError:
        raise ChainFormatError(0, "truncated header") from None
    blocks = []
    for i in range(count):
        try:
            blocks.append(_parse_block(r.lp()))
        except ValueError as e:
            raise ChainFormatError(i, str(e)) from None
    if not r.done():
        raise ChainFormatError(count - 1 if count else 0, "trailing bytes")
    return Chain(tuple(blocks))


def validate_chain_bytes(blob: bytes) -> tuple[bool, int | None]:
    """Validate a serialized chain; parse failures count as invalid blocks."""
    try:
        chain = import_chain(blob)
    except ChainFormatError as e:
        return False, e.block_index
    return validate_chain(chain)


# --- proposer selection ---


def select_proposer(stakes: list[float], round_no: int, seed: int) -> int:
    """Stake-weighted proposer draw, deterministic in (stakes, round, seed)."""
    weights = np.asarray(stakes, dtype=np.float64)
    if np.any(weights < 0):
        raise StakeError("stakes must be nonnegative")
    total = weights.sum()
    if total <= 0:
        raise StakeError("total stake must be positive")
    rng = np.random.default_rng([seed, round_no])
    u = rng.random() * total
    return int(np.searchsorted(np.cumsum(weights), u, side="right"))


# --- payload digests (wire format between FL modules and the ledger) ---


def _array_bytes(arr) -> bytes:
    return np.ascontiguousarray(arr, dtype="<f8").tobytes()


def digest_client_update(update) -> bytes:
    """Canonical digest of a FedCurv client update (F_k, g_k, theta_local)."""
    h = hashlib.sha256()
    h.update(b"bfel-client-update-v1")
    h.update(_u64(update.client_id))
    h.update(_u64(update.round))
    h.update(_u64(update.sample_count))
    h.update(_lp(_array_bytes(update.fisher.values)))
    h.update(_lp(_array_bytes(update.gradient.values)))
    h.update(_lp(_array_bytes(update.theta_local.values)))
    return h.digest()


def digest_plain_update(update) -> bytes:
    """Canonical digest of a FedAvg client update (theta_local only)."""
    h = hashlib.sha256()
    h.update(b"bfel-plain-update-v1")
    h.update(_u64(update.client_id))
    h.update(_u64(update.round))
    h.update(_u64(update.sample_count))
    h.update(_lp(_array_bytes(update.theta_local.values)))
    return h.digest()


def digest_global_model(theta_values, round_no: int) -> bytes:
    h = hashlib.sha256()
    h.update(b"bfel-global-model-v1")
    h.update(_u64(round_no))
    h.update(_lp(_array_bytes(theta_values)))
    return h.digest()
