"""Counter-based uniforms keyed on (seed, path_id, step, component).

Every uniform is a pure function of its key, so simulated paths do not
depend on the number of paths requested, on chunking, or on threads.
The bit generator is Philox4x32-10 evaluated on numpy uint64 lanes.
"""

import hashlib

import numpy as np

__all__ = ["philox4x32", "uniforms", "derive_seed"]

_M0 = np.uint64(0xD2511F53)
_M1 = np.uint64(0xCD9E8D57)
_W0 = 0x9E3779B9
_W1 = 0xBB67AE85
_MASK = np.uint64(0xFFFFFFFF)
_SHIFT = np.uint64(32)


def philox4x32(counter, key, rounds=10):
    """Apply Philox4x32 to broadcastable counter words.

    Parameters
    ----------
    counter : sequence of 4 integer arrays (uint32 values)
    key : pair of python ints (uint32 values)

    Returns
    -------
    list of 4 uint64 arrays holding 32-bit outputs
    """
    c0, c1, c2, c3 = (np.asarray(c, dtype=np.uint64) & _MASK for c in counter)
    c0, c1, c2, c3 = np.broadcast_arrays(c0, c1, c2, c3)
    k0, k1 = int(key[0]) & 0xFFFFFFFF, int(key[1]) & 0xFFFFFFFF
    for _ in range(rounds):
        p0 = c0 * _M0
        p1 = c2 * _M1
        hi0, lo0 = p0 >> _SHIFT, p0 & _MASK
        hi1, lo1 = p1 >> _SHIFT, p1 & _MASK
        c0, c1, c2, c3 = (
            hi1 ^ c1 ^ np.uint64(k0),
            lo1,
            hi0 ^ c3 ^ np.uint64(k1),
            lo0,
        )
        k0 = (k0 + _W0) & 0xFFFFFFFF
        k1 = (k1 + _W1) & 0xFFFFFFFF
    return [c0, c1, c2, c3]


def derive_seed(master_seed, domain):
    """Map a master seed and a domain tag to an independent 64-bit seed."""
    payload = f"{int(master_seed)}:{domain}".encode()
    return int.from_bytes(hashlib.blake2b(payload, digest_size=8).digest(), "little")


def uniforms(seed, path_ids, step, n_components):
    """Uniforms in [0, 1) with shape ``(len(path_ids), n_components)``.

    Component ``c`` of step ``step`` for path ``p`` is always the same
    double regardless of the other arguments. Each Philox block yields two
    53-bit doubles, so components ``2b`` and ``2b + 1`` share block ``b``.
    """
    path_ids = np.asarray(path_ids, dtype=np.uint64)
    n_blocks = (n_components + 1) // 2
    key = (seed & 0xFFFFFFFF, (seed >> 32) & 0xFFFFFFFF)
    blocks = np.arange(n_blocks, dtype=np.uint64)
    out = philox4x32(
        (
            path_ids[:, None] & _MASK,
            path_ids[:, None] >> _SHIFT,
            np.uint64(step),
            blocks[None, :],
        ),
        key,
    )
    a0, a1, a2, a3 = out
    scale = 1.0 / 9007199254740992.0  # 2**-53
    u_even = ((a0 >> np.uint64(5)) * np.uint64(67108864) + (a1 >> np.uint64(6))).astype(np.float64) * scale
    u_odd = ((a2 >> np.uint64(5)) * np.uint64(67108864) + (a3 >> np.uint64(6))).astype(np.float64) * scale
    u = np.empty((path_ids.shape[0], 2 * n_blocks))
    u[:, 0::2] = u_even
    u[:, 1::2] = u_odd
    return u[:, :n_components]
