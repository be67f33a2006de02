import hashlib


def derive_seed(seed: int, name: str) -> int:
    """Stable per-subsystem seed derived from the run seed."""
    digest = hashlib.sha256(f"{seed}:{name}".encode()).digest()
    return int.from_bytes(digest[:4], "little")
