import hashlib


def derive_seed(seed, label):
    """Stable 63-bit sub-seed for a named subsystem (e.g. ``"G_ST"``, ``"order"``)."""
    digest = hashlib.sha256(f"{int(seed)}:{label}".encode("utf-8")).digest()
    return int.from_bytes(digest[:8], "little") >> 1
