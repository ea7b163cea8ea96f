"""Concealed one-time codes: generation, display form and syntax checks."""

from __future__ import annotations

import math
import random
import secrets
from dataclasses import dataclass
from functools import lru_cache
from typing import Union

# Crockford-style base32: digits and uppercase letters minus I, L, O, U.
DEFAULT_ALPHABET = "0123456789ABCDEFGHJKMNPQRSTVWXYZ"
PRODUCTION_MIN_BITS = 64.0


class PolicyInvalid(ValueError):
    pass


@dataclass(frozen=True)
class CodePolicy:
    alphabet: str = DEFAULT_ALPHABET
    body_length: int = 16
    group_size: int = 4

    def validate(self, production: bool = False) -> None:
        if len(self.alphabet) < 2:
            raise PolicyInvalid("alphabet needs at least 2 characters")
        if len(set(self.alphabet)) != len(self.alphabet):
            raise PolicyInvalid("alphabet has duplicate characters")
        if "-" in self.alphabet or any(c.isspace() for c in self.alphabet):
            raise PolicyInvalid("alphabet may not contain '-' or whitespace")
        if self.body_length < 1:
            raise PolicyInvalid("body_length must be positive")
        if self.group_size < 1:
            raise PolicyInvalid("group_size must be positive")
        if production and entropy_bits(self) < PRODUCTION_MIN_BITS:
            raise PolicyInvalid(
                f"production policies need >= {PRODUCTION_MIN_BITS:g} bits, got {entropy_bits(self):.2f}"
            )

    @property
    def production_grade(self) -> bool:
        return entropy_bits(self) >= PRODUCTION_MIN_BITS

    @property
    def case_insensitive(self) -> bool:
        return self.alphabet == self.alphabet.upper()


@dataclass(frozen=True)
class SecretCode:
    body: str
    checksum_char: str

    @property
    def raw(self) -> str:
        return self.body + self.checksum_char

    def display(self, policy: CodePolicy | None = None) -> str:
        """Hyphen-grouped form printed inside the packaging, e.g. ``XXXX-XXXX-XXXX-XXXX-C``."""
        size = (policy or CodePolicy()).group_size
        groups = [self.body[i:i + size] for i in range(0, len(self.body), size)]
        return "-".join(groups + [self.checksum_char])

    def __str__(self) -> str:
        return self.display()


Rng = Union[random.Random, int, None]


def entropy_bits(policy: CodePolicy) -> float:
    return policy.body_length * math.log2(len(policy.alphabet))


@lru_cache(maxsize=64)
def _weights(modulus: int, length: int) -> tuple[int, ...]:
    # Weights coprime to the modulus make every single substitution change the sum.
    out = []
    w = 1
    while len(out) < length:
        if math.gcd(w, modulus) == 1:
            out.append(w)
        w += 1
    return tuple(out)


def checksum(body: str, policy: CodePolicy) -> str:
    alphabet = policy.alphabet
    m = len(alphabet)
    total = sum(w * alphabet.index(ch) for w, ch in zip(_weights(m, len(body)), body))
    return alphabet[total % m]


def normalize(candidate: str, policy: CodePolicy = CodePolicy()) -> str:
    """Strip display hyphens and whitespace; fold case for uppercase alphabets."""
    s = "".join(ch for ch in candidate if ch != "-" and not ch.isspace())
    return s.upper() if policy.case_insensitive else s


def _as_rng(rng: Rng) -> random.Random:
    if rng is None:
        return secrets.SystemRandom()
    if isinstance(rng, int):
        return random.Random(rng)
    return rng


def generate_code(policy: CodePolicy = CodePolicy(), rng: Rng = None) -> SecretCode:
    """Draw a fresh code.

    ``rng=None`` uses the OS CSPRNG; an int seed or a ``random.Random`` gives
    reproducible output for tests and simulations.
    """
    policy.validate()
    r = _as_rng(rng)
    m = len(policy.alphabet)
    body = "".join(policy.alphabet[r.randrange(m)] for _ in range(policy.body_length))
    return SecretCode(body, checksum(body, policy))


def check_code_format(candidate: str, policy: CodePolicy = CodePolicy()) -> bool:
    if not isinstance(candidate, str):
        return False
    s = normalize(candidate, policy)
    if len(s) != policy.body_length + 1:
        return False
    if any(ch not in policy.alphabet for ch in s):
        return False
    return checksum(s[:-1], policy) == s[-1]


def parse_code(candidate: str, policy: CodePolicy = CodePolicy()) -> SecretCode | None:
    """Return the code in canonical form, or None if it is not well-formed."""
    if not check_code_format(candidate, policy):
        return None
    s = normalize(candidate, policy)
    return SecretCode(s[:-1], s[-1])
