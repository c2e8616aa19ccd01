"""Training loops: exact REINFORCE ascent and sampled GRPO with clipping.

Randomness comes from a single ``numpy.random.PCG64`` seeded with
``TrainConfig.seed``.  Its seed sequence is split into two child streams:
one for rollouts and one for Monte Carlo diagnostics, so turning diagnostics
on or off never changes the training trajectory.
"""

from __future__ import annotations

import time
from dataclasses import dataclass, field

import numpy as np

from . import calculus as calc
from .core import (
    EnvSpec,
    RewardTable,
    TabularPolicy,
    all_completion_dists,
    expected_rewards,
    sample_completions,
)
from .scalarize import Controller, make_controller, ctwa_batch_covariance

ALGORITHMS = ("reinforce", "grpo")


class NumericalAbort(RuntimeError):
    """A non-finite quantity appeared during training."""

    def __init__(self, message: str, dump: dict):
        super().__init__(message)
        self.dump = dump


@dataclass
class TrainConfig:
    algorithm: str = "grpo"
    controller: str = "linear"
    controller_params: dict = field(default_factory=dict)
    learning_rate: float = 1e-2
    group_size: int = 16
    batch_prompts: int = 32
    eps_clip: float = 0.2
    beta_kl: float = 0.0
    lambda_entropy: float = 0.0
    steps: int = 100
    seed: int = 0
    inner_epochs: int = 1
    natural: bool = False
    normalize_surrogate: bool = False
    kl_reference: str = "initial"
    momentum: float = 0.0
    diagnostics: bool = True

    def __post_init__(self):
        if self.algorithm not in ALGORITHMS:
            raise ValueError(f"algorithm must be one of {ALGORITHMS}, got {self.algorithm!r}")
        if self.algorithm == "grpo" and self.group_size < 2:
            raise ValueError("grpo requires group_size >= 2")
        if not 0 < self.eps_clip < 1:
            raise ValueError("eps_clip must lie in (0, 1)")
        if self.learning_rate < 0:
            raise ValueError("learning_rate must be nonnegative")
        if self.beta_kl < 0 or self.lambda_entropy < 0:
            raise ValueError("regularization coefficients must be nonnegative")
        if self.steps < 0 or self.inner_epochs < 1 or self.batch_prompts < 1:
            raise ValueError("steps >= 0, inner_epochs >= 1 and batch_prompts >= 1 are required")
        if self.kl_reference not in ("initial", "old"):
            raise ValueError("kl_reference must be 'initial' or 'old'")
        if not 0 <= self.momentum < 1:
            raise ValueError("momentum must lie in [0, 1)")


@dataclass
class StepRecord:
    step: int
    rewards: np.ndarray
    value: float
    weights: np.ndarray
    covariances: np.ndarray
    distortion: float
    min_grad_cos: float
    mu: float
    grad_cosines: np.ndarray = field(repr=False, default=None)
    wall_time: float = field(repr=False, default=0.0)


@dataclass
class ExperimentResult:
    records: list
    policy: TabularPolicy
    controller: Controller


def score_table(controller: Controller, rewards: RewardTable) -> np.ndarray:
    """(num_prompts, N) scalar scores the controller currently induces, without touching its state."""
    if controller.tag == "tchebycheff":
        st = controller.state
        z = rewards.values.max(axis=(0, 1)) if st.reference is None else st.reference
        return -np.max(st.weights * (z - rewards.values), axis=-1)
    return rewards.values @ controller.weights()


class _Trainer:
    def __init__(self, env: EnvSpec, rewards: RewardTable, config: TrainConfig, policy=None, controller=None):
        self.env = env
        self.rewards = rewards
        self.cfg = config
        self.policy = TabularPolicy(env) if policy is None else policy.copy()
        self.initial = self.policy.copy()
        self.controller = controller or make_controller(
            config.controller, rewards.num_objectives, config.controller_params
        )
        seq = np.random.SeedSequence(config.seed)
        roll, diag = seq.spawn(2)
        self.rng = np.random.Generator(np.random.PCG64(roll))
        self.diag_rng = np.random.Generator(np.random.PCG64(diag))
        self.velocity = np.zeros(self.policy.num_params)
        self.step_index = 0

    # -- shared pieces ---------------------------------------------------

    def _reference(self, old):
        return self.initial if self.cfg.kl_reference == "initial" else old

    def _regularizer(self, policy, old):
        return calc.regularizer_gradient(
            policy, self._reference(old), self.cfg.beta_kl, self.cfg.lambda_entropy
        )

    def _check(self, name, vec, extra=None):
        if not np.all(np.isfinite(vec)):
            dump = {
                "step": self.step_index,
                "quantity": name,
                "params": self.policy.flat.tolist(),
                "weights": np.asarray(self.controller.weights()).tolist(),
            }
            if extra:
                dump.update(extra)
            raise NumericalAbort(f"non-finite {name} at step {self.step_index}", dump)

    def _apply(self, direction):
        self._check("update direction", direction)
        if self.cfg.momentum:
            self.velocity = self.cfg.momentum * self.velocity + direction
            direction = self.velocity
        self.policy = self.policy.with_params(self.policy.flat + self.cfg.learning_rate * direction)

    def _natural(self, policy, grad):
        F = calc.aggregated_fisher_full(policy, policy, 1)
        return calc.natural_gradient_general(F, grad).direction

    # -- REINFORCE -----------------------------------------------------------

    def reinforce_step(self):
        ctl = self.controller
        old = self.policy.copy()
        ctl.begin(expected_rewards(old, self.rewards))
        if ctl.kind == "gradient":
            grads = calc.per_objective_gradients(old, self.rewards)
            losses = self.rewards.bound - expected_rewards(old, self.rewards)
            g = ctl.combine_gradients(losses, grads)
            scores = None
        else:
            scores = ctl.scores(self.rewards.values)
            g = calc.policy_gradient_value(old, scores)
        g = g + (-self._regularizer(old, old))
        self._check("gradient", g)
        if self.cfg.natural:
            g = self._natural(old, g)
        self._apply(g)
        if scores is None:
            scores = score_table(ctl, self.rewards)
        cov = calc.exact_covariances(self.policy, self.rewards, scores)
        ctl.observe_covariances(cov)
        return old, cov, 0.0

    # -- GRPO ----------------------------------------------------------------

    def _sample_batch(self, old):
        cfg = self.cfg
        prompts = self.rng.integers(self.env.num_prompts, size=cfg.batch_prompts)
        comps = np.stack([sample_completions(old, int(x), self.rng, cfg.group_size) for x in prompts])
        R = self.rewards.values[prompts[:, None], comps]  # (B, K, M)
        return prompts, comps, R

    def _group_advantages(self, scores):
        return np.stack([calc.grpo_advantages(row) for row in scores])

    def _surrogate(self, policy, old, prompts, comps, adv):
        grad = np.zeros_like(policy.logits)
        for x, ys, A in zip(prompts, comps, adv):
            grad[x] += calc.surrogate_gradient(policy, old, int(x), ys, A, self.cfg.eps_clip)
        grad /= len(prompts)
        if self.cfg.normalize_surrogate:
            grad /= self.cfg.group_size * self.env.out_len
        return grad.ravel()

    def grpo_step(self):
        cfg, ctl = self.cfg, self.controller
        old = self.policy.copy()
        ctl.begin(expected_rewards(old, self.rewards))
        prompts, comps, R = self._sample_batch(old)
        per_obj_adv = None
        if ctl.kind == "gradient":
            per_obj_adv = np.stack(
                [self._group_advantages(R[:, :, m]) for m in range(R.shape[2])], axis=-1
            )
            adv = None
        elif ctl.advantage_level:
            per_obj_adv = np.stack(
                [self._group_advantages(R[:, :, m]) for m in range(R.shape[2])], axis=-1
            )
            adv = ctl.combine_advantages(per_obj_adv)
        else:
            adv = self._group_advantages(ctl.scores(R))

        for epoch in range(cfg.inner_epochs):
            pol = self.policy
            if ctl.kind == "gradient":
                grads = np.stack(
                    [self._surrogate(pol, old, prompts, comps, per_obj_adv[..., m]) for m in range(R.shape[2])]
                )
                if epoch == 0:
                    losses = self.rewards.bound - expected_rewards(old, self.rewards)
                    g = ctl.combine_gradients(losses, grads)
                else:
                    g = ctl.weights() @ grads
            else:
                g = self._surrogate(pol, old, prompts, comps, adv)
            g = g - self._regularizer(pol, old)
            self._check("gradient", g)
            if cfg.natural:
                g = self._natural(pol, g)
            self._apply(g)

        # completion weights under the updated policy
        if adv is None:
            adv_for_w = per_obj_adv @ ctl.weights()
        else:
            adv_for_w = adv
        w = np.stack(
            [
                calc.clip_arrays(self.policy, old, int(x), ys, A, cfg.eps_clip)[2].mean(axis=1)
                for x, ys, A in zip(prompts, comps, adv_for_w)
            ]
        )
        cov = ctwa_batch_covariance(R, w)
        ctl.observe_covariances(cov)
        distortion = 0.0
        if cfg.diagnostics:
            distortion = calc.clipping_distortion(
                self.policy, old, score_table(ctl, self.rewards), cfg.group_size, cfg.eps_clip, rng=self.diag_rng
            )
        return old, cov, distortion

    # -- loop --------------------------------------------------------------------

    def record(self, cov, distortion, started) -> StepRecord:
        pol = self.policy
        r = expected_rewards(pol, self.rewards)
        s = score_table(self.controller, self.rewards)
        V = float(np.mean(np.sum(all_completion_dists(pol) * s, axis=1)))
        cosines = np.ones((1, 1))
        min_cos = 1.0
        mu = float("nan")
        if self.cfg.diagnostics:
            grads = calc.per_objective_gradients(pol, self.rewards)
            if self.rewards.num_objectives > 1 and np.any(grads):
                cosines = calc.gradient_cosines(grads)
                off = cosines[~np.eye(len(cosines), dtype=bool)]
                off = off[np.isfinite(off)]
                min_cos = float(off.min()) if off.size else 0.0
            try:
                mu = min(calc.pl_report(pol, s, x).mu for x in range(self.env.num_prompts))
            except calc.AssumptionViolation:
                mu = float("nan")
        rec = StepRecord(
            step=self.step_index,
            rewards=r,
            value=V,
            weights=np.asarray(self.controller.weights(), dtype=float),
            covariances=np.asarray(cov, dtype=float),
            distortion=float(distortion),
            min_grad_cos=min_cos,
            mu=mu,
            grad_cosines=cosines,
            wall_time=time.perf_counter() - started,
        )
        self._check("record", np.concatenate([r, [V], rec.weights, rec.covariances, [rec.distortion]]))
        return rec

    def step(self) -> StepRecord:
        started = time.perf_counter()
        self.step_index += 1
        if self.cfg.algorithm == "reinforce":
            _, cov, dist = self.reinforce_step()
        else:
            _, cov, dist = self.grpo_step()
        return self.record(cov, dist, started)


def reinforce_step(policy, rewards, controller, config, env=None):
    """One exact-gradient step.  Returns ``(new_policy, StepRecord)``."""
    tr = _Trainer(policy.env, rewards, config, policy=policy, controller=controller)
    rec = tr.step()
    return tr.policy, rec


def grpo_step(policy, rewards, controller, config, rng=None):
    """One sampled GRPO iteration.  ``rng`` overrides the seeded rollout stream."""
    tr = _Trainer(policy.env, rewards, config, policy=policy, controller=controller)
    if rng is not None:
        tr.rng = rng
    rec = tr.step()
    return tr.policy, rec


def run_experiment(env: EnvSpec, rewards: RewardTable, config: TrainConfig, policy=None, callback=None) -> ExperimentResult:
    """Run ``config.steps`` iterations and collect one record per step."""
    tr = _Trainer(env, rewards, config, policy=policy)
    records = []
    for _ in range(config.steps):
        rec = tr.step()
        records.append(rec)
        if callback is not None:
            callback(rec)
    return ExperimentResult(records, tr.policy, tr.controller)
