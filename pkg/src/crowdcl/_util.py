import hashlib
import json


def canonical_json(obj) -> str:
    return json.dumps(obj, sort_keys=True, separators=(",", ":"))


def stable_hash(obj, length: int = 12) -> str:
    return hashlib.sha256(canonical_json(obj).encode()).hexdigest()[:length]


def id_hash(sample_id: str) -> int:
    """Platform-independent 64-bit hash of a sample id."""
    return int.from_bytes(hashlib.sha256(sample_id.encode()).digest()[:8], "little")
