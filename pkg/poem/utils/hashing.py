"""
Pinned 64-bit hashing shared by graph keys and fingerprints.

All hashes are BLAKE2b with an 8-byte digest and a fixed personalisation
string, computed over little-endian signed 64-bit integers. Python's built-in
``hash`` is never used, so fingerprints are bit-identical across processes and
platforms.
"""
import hashlib
import struct

HASH_PERSON = b'poem-fp-v1'

MASK64 = (1 << 64) - 1

# Signed view of the unsigned digest, so hashes can be fed back into the packer
_SIGN_BIT = 1 << 63


def hash_ints(*values):
    """
    Hash a sequence of integers to an unsigned 64-bit integer.

    Args:
        *values (int): Integers in the signed 64-bit range (larger unsigned
            hashes are accepted and reinterpreted as signed).

    Returns:
        int: Hash in ``[0, 2**64)``.
    """
    packed = struct.pack(f'<{len(values)}q', *(_as_signed(v) for v in values))
    digest = hashlib.blake2b(packed, digest_size=8, person=HASH_PERSON).digest()
    return int.from_bytes(digest, 'little')


def _as_signed(value):
    value &= MASK64
    return value - (1 << 64) if value & _SIGN_BIT else value
