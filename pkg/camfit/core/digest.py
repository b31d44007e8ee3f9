"""
Integrity digests for checkpoint payloads
"""

from cryptography.hazmat.primitives import constant_time, hashes


class PayloadDigest:
    """SHA-256 digests of binary payloads"""

    def __init__(self):
        self.algorithm = hashes.SHA256()

    def digest(self, data: bytes) -> bytes:
        """Digest of `data`"""
        hasher = hashes.Hash(self.algorithm)
        hasher.update(data)
        return hasher.finalize()

    def hexdigest(self, data: bytes) -> str:
        return self.digest(data).hex()

    def verify(self, data: bytes, expected: bytes) -> bool:
        """Constant-time comparison against a stored digest"""
        return constant_time.bytes_eq(self.digest(data), expected)


# Global digest instance
payload_digest = PayloadDigest()
