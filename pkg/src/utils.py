import json
import hashlib
from typing import Tuple, Any

import torch


def canonicalize_params(params: dict[str, Any]) -> Tuple[str, str]:
    """
    Produce a canonical JSON representation and its SHA-256 hash.

    Keys are sorted and separators carry no whitespace, so the same
    configuration always serializes to the same bytes.

    Args:
        params: The input parameters dictionary.

    Returns:
        A tuple containing:
        - The canonical JSON string.
        - The SHA-256 hex digest of that string.
    """
    canonical_json = json.dumps(params, sort_keys=True, separators=(',', ':'))

    payload_hash = hashlib.sha256(canonical_json.encode('utf-8')).hexdigest()

    return canonical_json, payload_hash


def derive_seed(*parts: int) -> int:
    """Mix integer parts (seed, step, index, ...) into one 63-bit seed."""
    _, digest = canonicalize_params({"parts": list(parts)})
    return int(digest[:16], 16) & 0x7FFF_FFFF_FFFF_FFFF


def make_generator(*parts: int) -> torch.Generator:
    """CPU generator seeded from (seed, step, index, ...)."""
    gen = torch.Generator()
    gen.manual_seed(derive_seed(*parts))
    return gen
