"""Finite environments and tabular autoregressive softmax policies.

A completion is a fixed-length token sequence ``y = (y_1, ..., y_L)`` over a
vocabulary of size ``V``.  Completions are indexed in base ``V`` with the first
token as the most significant digit, so for ``V = 2, L = 2`` the indices
``0, 1, 2, 3`` are ``(0,0), (0,1), (1,0), (1,1)``.

The policy keeps one logit block per ``(prompt, prefix)``.  Prefixes of length
``l`` occupy a contiguous range of block indices starting at
``(V**l - 1) / (V - 1)`` (or ``l`` when ``V == 1``), and within a length they
are ordered by the same base-``V`` convention.
"""

from __future__ import annotations

from dataclasses import dataclass, field
from functools import cached_property

import numpy as np

DEFAULT_ENUMERATION_CAP = 4096


class ConfigurationError(ValueError):
    """Raised when an environment or table is inconsistent."""


@dataclass(frozen=True)
class EnvSpec:
    num_prompts: int
    vocab_size: int
    out_len: int
    num_objectives: int
    reward_bound: float = 1.0
    enumeration_cap: int = DEFAULT_ENUMERATION_CAP

    def __post_init__(self):
        for name in ("num_prompts", "vocab_size", "out_len", "num_objectives"):
            value = getattr(self, name)
            if int(value) != value or value < 1:
                raise ConfigurationError(f"{name} must be a positive integer, got {value!r}")
        if not self.reward_bound > 0:
            raise ConfigurationError(f"reward_bound must be positive, got {self.reward_bound!r}")
        if self.num_completions > self.enumeration_cap:
            raise ConfigurationError(
                f"{self.vocab_size}**{self.out_len} = {self.num_completions} completions "
                f"exceeds the enumeration cap {self.enumeration_cap}"
            )

    @property
    def num_completions(self) -> int:
        return self.vocab_size**self.out_len

    @property
    def num_prefixes(self) -> int:
        return sum(self.vocab_size**l for l in range(self.out_len))

    @property
    def num_params(self) -> int:
        return self.num_prompts * self.num_prefixes * self.vocab_size

    def prefix_offset(self, length: int) -> int:
        return sum(self.vocab_size**l for l in range(length))

    @cached_property
    def tokens(self) -> np.ndarray:
        """(N, L) array of tokens for every completion index."""
        V, L = self.vocab_size, self.out_len
        idx = np.arange(self.num_completions)
        powers = V ** np.arange(L - 1, -1, -1)
        return (idx[:, None] // powers[None, :]) % V

    @cached_property
    def prefix_index(self) -> np.ndarray:
        """(N, L) array: logit block used at position ``l`` of each completion."""
        V, L = self.vocab_size, self.out_len
        out = np.empty((self.num_completions, L), dtype=np.int64)
        value = np.zeros(self.num_completions, dtype=np.int64)
        for l in range(L):
            out[:, l] = self.prefix_offset(l) + value
            value = value * V + self.tokens[:, l]
        return out

    def completion_tokens(self, index: int) -> tuple[int, ...]:
        return tuple(int(t) for t in self.tokens[index])

    def completion_index(self, tokens) -> int:
        index = 0
        for t in tokens:
            index = index * self.vocab_size + int(t)
        return index


@dataclass(frozen=True)
class RewardTable:
    """Rewards ``values[prompt, completion, objective]`` bounded by ``bound``."""

    values: np.ndarray
    bound: float

    def __post_init__(self):
        values = np.asarray(self.values, dtype=float)
        if values.ndim != 3:
            raise ConfigurationError(f"reward table must be 3-d, got shape {values.shape}")
        if not np.all(np.isfinite(values)):
            raise ConfigurationError("reward table contains non-finite entries")
        if np.any(np.abs(values) > self.bound * (1 + 1e-12)):
            raise ConfigurationError(
                f"reward entry {np.abs(values).max():.6g} exceeds bound {self.bound:.6g}"
            )
        object.__setattr__(self, "values", values)

    @classmethod
    def for_env(cls, env: EnvSpec, values) -> "RewardTable":
        values = np.asarray(values, dtype=float)
        expected = (env.num_prompts, env.num_completions, env.num_objectives)
        if values.shape != expected:
            raise ConfigurationError(f"reward table shape {values.shape} != expected {expected}")
        return cls(values, env.reward_bound)

    @property
    def num_objectives(self) -> int:
        return self.values.shape[2]

    def objective(self, m: int) -> np.ndarray:
        return self.values[:, :, m]


def log_softmax(logits: np.ndarray, axis: int = -1) -> np.ndarray:
    shift = logits - logits.max(axis=axis, keepdims=True)
    return shift - np.log(np.exp(shift).sum(axis=axis, keepdims=True))


@dataclass
class TabularPolicy:
    """Softmax policy with logits of shape ``(num_prompts, num_prefixes, vocab_size)``."""

    env: EnvSpec
    logits: np.ndarray = field(default=None)

    def __post_init__(self):
        shape = (self.env.num_prompts, self.env.num_prefixes, self.env.vocab_size)
        if self.logits is None:
            self.logits = np.zeros(shape)
        else:
            self.logits = np.array(self.logits, dtype=float).reshape(shape)

    @classmethod
    def random(cls, env: EnvSpec, rng: np.random.Generator, scale: float = 1.0) -> "TabularPolicy":
        shape = (env.num_prompts, env.num_prefixes, env.vocab_size)
        return cls(env, rng.normal(scale=scale, size=shape))

    @property
    def num_params(self) -> int:
        return self.logits.size

    @property
    def flat(self) -> np.ndarray:
        return self.logits.ravel().copy()

    def with_params(self, flat: np.ndarray) -> "TabularPolicy":
        return TabularPolicy(self.env, np.asarray(flat, dtype=float).copy())

    def copy(self) -> "TabularPolicy":
        return TabularPolicy(self.env, self.logits.copy())

    def token_log_probs(self, prompt: int) -> np.ndarray:
        """(num_prefixes, V) next-token log-probabilities for one prompt."""
        return log_softmax(self.logits[prompt], axis=-1)

    def token_probs(self, prompt: int) -> np.ndarray:
        return np.exp(self.token_log_probs(prompt))

    def completion_token_log_probs(self, prompt: int) -> np.ndarray:
        """(N, L) log p(y_l | x, y_<l) for every completion."""
        logp = self.token_log_probs(prompt)
        return logp[self.env.prefix_index, self.env.tokens]

    def completion_log_probs(self, prompt: int) -> np.ndarray:
        return self.completion_token_log_probs(prompt).sum(axis=1)


def _check_prompt(env: EnvSpec, prompt: int) -> None:
    if not 0 <= prompt < env.num_prompts:
        raise IndexError(f"prompt {prompt} out of range [0, {env.num_prompts})")


def completion_dist(policy: TabularPolicy, prompt: int) -> np.ndarray:
    """Probabilities of every completion of ``prompt`` (log-space product)."""
    _check_prompt(policy.env, prompt)
    return np.exp(policy.completion_log_probs(prompt))


def all_completion_dists(policy: TabularPolicy) -> np.ndarray:
    """(num_prompts, N) completion distributions."""
    return np.stack([completion_dist(policy, x) for x in range(policy.env.num_prompts)])


@dataclass(frozen=True)
class Sample:
    completion: int
    token_log_probs: np.ndarray

    @property
    def log_prob(self) -> float:
        return float(self.token_log_probs.sum())


def sample_completion(policy: TabularPolicy, prompt: int, rng: np.random.Generator) -> Sample:
    """Draw one completion token by token and return it with its token log-probs."""
    _check_prompt(policy.env, prompt)
    env = policy.env
    logp = policy.token_log_probs(prompt)
    value = 0
    tokens = []
    logs = np.empty(env.out_len)
    for l in range(env.out_len):
        block = env.prefix_offset(l) + value
        probs = np.exp(logp[block])
        tok = int(rng.choice(env.vocab_size, p=probs / probs.sum()))
        tokens.append(tok)
        logs[l] = logp[block, tok]
        value = value * env.vocab_size + tok
    return Sample(env.completion_index(tokens), logs)


def sample_completions(
    policy: TabularPolicy, prompt: int, rng: np.random.Generator, size: int
) -> np.ndarray:
    """Draw ``size`` i.i.d. completion indices from the enumerated distribution."""
    probs = completion_dist(policy, prompt)
    # inverse-CDF on a fixed number of uniforms keeps the rng stream layout stable
    cdf = np.cumsum(probs)
    cdf[-1] = 1.0
    u = rng.random(size)
    return np.searchsorted(cdf, u, side="right").clip(0, len(probs) - 1)


def expectation(policy: TabularPolicy, table: np.ndarray) -> float:
    """E_x E_y[table[x, y]] with x uniform over prompts."""
    table = np.asarray(table, dtype=float)
    dists = all_completion_dists(policy)
    if table.shape != dists.shape:
        raise ConfigurationError(f"table shape {table.shape} != {dists.shape}")
    return float(np.mean(np.sum(dists * table, axis=1)))


def expected_reward(policy: TabularPolicy, rewards: RewardTable, objective: int) -> float:
    return expectation(policy, rewards.objective(objective))


def expected_rewards(policy: TabularPolicy, rewards: RewardTable) -> np.ndarray:
    dists = all_completion_dists(policy)
    return np.einsum("xy,xym->m", dists, rewards.values) / policy.env.num_prompts


def value(policy: TabularPolicy, scalar_scores: np.ndarray) -> float:
    """Scalarized value V(theta) = E_x E_y[s(x, y)]."""
    return expectation(policy, scalar_scores)


def prompt_value(policy: TabularPolicy, scalar_scores: np.ndarray, prompt: int) -> float:
    return float(completion_dist(policy, prompt) @ np.asarray(scalar_scores)[prompt])
