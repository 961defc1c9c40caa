"""Optimisers that craft adversarial voices: FGSM, PGD, CW2 and NES/FAKEBOB.

All attacks minimise a loss from :mod:`srattack.losses`; budgeted attacks
stay inside ``clip_box`` (an L-inf ball intersected with [-1, 1]).
"""

from __future__ import annotations

import json
from dataclasses import asdict, dataclass, field, replace

import numpy as np

from .audio import Waveform, as_array, convolve_full
from .losses import (AttackSetting, LossSettingError, input_loss_value_and_grad,
                     is_cw_eligible, loss_value_and_grad)
from .srs import IMPOSTER, EmbedderSpec, SpeakerDatabase, TaskKind, decide, embed

OPTIMIZERS = ("FGSM", "PGD", "CW2", "NES")


@dataclass(frozen=True)
class AttackConfig:
    optimizer: str = "PGD"
    epsilon: float = 0.002
    alpha: float | None = None
    iters: int = 5
    kappa: float = 0.0
    lambda_init: float = 0.1
    binary_search_steps: int = 9
    nes_samples: int = 50
    nes_sigma: float = 0.001
    random_start: bool = False
    adam: bool = False
    early_stop: bool | None = None
    max_queries: int | None = None
    threshold_tolerance: float = 0.01
    seed: int = 0

    def __post_init__(self):
        if self.optimizer not in OPTIMIZERS:
            raise ValueError(f"optimizer must be one of {OPTIMIZERS}")
        if self.optimizer != "CW2":
            if self.epsilon <= 0:
                raise ValueError("epsilon must be positive")
            if self.optimizer != "FGSM" and self.step_size > self.epsilon:
                raise ValueError("alpha must not exceed epsilon")
        if self.iters < 1:
            raise ValueError("iters must be >= 1")
        if self.optimizer == "CW2" and self.binary_search_steps < 1:
            raise ValueError("CW2 needs at least one binary search step")
        if self.optimizer == "NES" and (self.nes_samples < 2 or self.nes_samples % 2):
            raise ValueError("nes_samples must be even and >= 2")

    @property
    def step_size(self) -> float:
        if self.alpha is not None:
            return self.alpha
        if self.optimizer == "FGSM":
            return self.epsilon
        if self.optimizer == "CW2":
            return 1e-3
        return self.epsilon / 5

    @property
    def stops_early(self) -> bool:
        if self.early_stop is not None:
            return self.early_stop
        return self.optimizer == "NES"

    def to_dict(self) -> dict:
        return asdict(self)


@dataclass(eq=False)
class AttackOutcome:
    adversarial: Waveform
    success: bool
    iterations_used: int
    queries_used: int
    final_loss: float
    perturbation_linf: float
    perturbation_l2: float
    decision: object = None
    extra: dict = field(default_factory=dict)

    def record(self, **meta) -> dict:
        rec = dict(meta)
        rec.update(success=bool(self.success), decision=self.decision,
                   linf=float(self.perturbation_linf), l2=float(self.perturbation_l2),
                   queries=int(self.queries_used), iterations=int(self.iterations_used),
                   final_loss=float(self.final_loss))
        rec.update(self.extra)
        return rec

    def to_json(self, **meta) -> str:
        return json.dumps(self.record(**meta), sort_keys=True)


def clip_box(x_orig, x_cand, epsilon: float) -> np.ndarray:
    """Elementwise ``min(x + eps, 1, max(x', x - eps, -1))``."""
    x = as_array(x_orig)
    c = as_array(x_cand)
    if x.shape != c.shape:
        raise ValueError(f"length mismatch: {x.size} vs {c.size}")
    return np.minimum(np.minimum(x + epsilon, 1.0), np.maximum(np.maximum(c, x - epsilon), -1.0))


def _outcome(x0: Waveform, xs: np.ndarray, success, iters, queries, loss, decision, **extra):
    delta = xs - x0.samples
    return AttackOutcome(x0.with_samples(xs), bool(success), int(iters), int(queries),
                         float(loss), float(np.max(np.abs(delta))), float(np.linalg.norm(delta)),
                         decision, extra)


def white_box_oracle(loss: str, setting: AttackSetting, db: SpeakerDatabase,
                     spec: EmbedderSpec, theta=None):
    """``f(x) -> (loss, scores, grad)`` using exact backpropagation."""
    setting.check_db(db)

    def f(xs):
        return input_loss_value_and_grad(loss, xs, db, spec, setting, theta)

    return f


class _Adam:
    def __init__(self, lr, shape, b1=0.9, b2=0.999, eps=1e-8):
        self.lr, self.b1, self.b2, self.eps = lr, b1, b2, eps
        self.m = np.zeros(shape)
        self.v = np.zeros(shape)
        self.t = 0

    def step(self, g):
        self.t += 1
        self.m = self.b1 * self.m + (1 - self.b1) * g
        self.v = self.b2 * self.v + (1 - self.b2) * g * g
        m_hat = self.m / (1 - self.b1 ** self.t)
        v_hat = self.v / (1 - self.b2 ** self.t)
        return self.lr * m_hat / (np.sqrt(v_hat) + self.eps)


def signed_descent(x0: Waveform, grad_fn, goal, cfg: AttackConfig, *, alpha=None, rng=None):
    """Shared FGSM/PGD/FAKEBOB loop.

    ``grad_fn(xs) -> (loss, scores, grad)``; ``goal(scores) -> (success, decision)``.
    Returns ``(x, iterations, last loss)``.
    """
    alpha = cfg.step_size if alpha is None else alpha
    xs0 = x0.samples
    x = xs0.copy()
    if cfg.random_start:
        rng = np.random.default_rng(cfg.seed if rng is None else rng)
        x = clip_box(xs0, x + rng.uniform(-cfg.epsilon, cfg.epsilon, x.size), cfg.epsilon)
    adam = _Adam(alpha, x.shape) if cfg.adam else None
    used = 0
    loss = np.nan
    for _ in range(cfg.iters):
        loss, scores, grad = grad_fn(x)
        if cfg.stops_early and goal(scores)[0]:
            break
        if not np.any(grad):
            break
        step = adam.step(grad) if adam else alpha * np.sign(grad)
        x = clip_box(xs0, x - step, cfg.epsilon)
        used += 1
    return x, used, loss


def _finish(x0, x, used, queries, loss_fn, goal, extra=None):
    loss, scores = loss_fn(x)
    success, decision = goal(scores)
    return _outcome(x0, x, success, used, queries, loss, decision, **(extra or {}))


def _white_box_goal(setting, db):
    def goal(scores):
        d = decide(scores, db)
        return setting.goal_met(d, db), d
    return goal


def _as_waveform(x) -> Waveform:
    return x if isinstance(x, Waveform) else Waveform(x)


def pgd(x, loss: str, setting: AttackSetting, db: SpeakerDatabase, spec: EmbedderSpec,
        cfg: AttackConfig) -> AttackOutcome:
    """Iterated signed-gradient descent projected onto the eps-ball and box."""
    x0 = _as_waveform(x)
    f = white_box_oracle(loss, setting, db, spec)
    goal = _white_box_goal(setting, db)
    xs, used, _ = signed_descent(x0, f, goal, cfg)
    return _finish(x0, xs, used, 0, lambda v: f(v)[:2], goal)


def fgsm(x, loss: str, setting: AttackSetting, db: SpeakerDatabase, spec: EmbedderSpec,
         cfg: AttackConfig) -> AttackOutcome:
    """One signed step of size epsilon."""
    one = replace(cfg, optimizer="FGSM", iters=1, alpha=cfg.epsilon, random_start=False,
                  adam=False, early_stop=False)
    return pgd(x, loss, setting, db, spec, one)


# ---------------------------------------------------------------------------
# CW2


def cw2(x, loss: str, setting: AttackSetting, db: SpeakerDatabase, spec: EmbedderSpec,
        cfg: AttackConfig) -> AttackOutcome:
    """L2 attack over ``z = arctanh(x')`` with a binary search on the distance weight.

    Objective per round: ``max(L(tanh z) + kappa, 0) + lam * ||tanh z - x||_2``,
    minimised with Adam (state reset each round). ``lam`` is bisected inside
    ``[0, 10 * lambda_init * 2**steps]`` towards the largest value that still
    succeeds; the smallest successful perturbation across rounds is returned.
    """
    if not is_cw_eligible(loss, setting):
        raise LossSettingError(f"loss {loss} is not CW-eligible for {setting.id}")
    x0 = _as_waveform(x)
    xs = np.clip(x0.samples, -(1 - 1e-6), 1 - 1e-6)
    z0 = np.arctanh(xs)
    f = white_box_oracle(loss, setting, db, spec)
    goal = _white_box_goal(setting, db)
    lam = cfg.lambda_init
    lo, hi = 0.0, 10.0 * cfg.lambda_init * 2 ** cfg.binary_search_steps
    best = None  # (l2, x, loss, decision)
    total = 0
    for _ in range(cfg.binary_search_steps):
        z = z0.copy()
        adam = _Adam(cfg.step_size, z.shape)
        round_ok = False
        for _ in range(cfg.iters):
            xa = np.tanh(z)
            value, scores, g_loss = f(xa)
            total += 1
            ok, d = goal(scores)
            delta = xa - x0.samples
            l2 = float(np.linalg.norm(delta))
            if ok and value <= -cfg.kappa:
                round_ok = True
                if best is None or l2 < best[0]:
                    best = (l2, xa.copy(), value, d)
            g = g_loss if value + cfg.kappa > 0 else np.zeros_like(z)
            if l2 > 0:
                g = g + lam * delta / l2
            if not np.any(g):
                break
            z = z - adam.step(g * (1.0 - xa * xa))
        if round_ok:
            lo = lam
        else:
            hi = lam
        lam = (lo + hi) / 2
    if best is None:
        xa = np.tanh(z)
        value, scores = f(xa)[:2]
        ok, d = goal(scores)
        return _outcome(x0, xa, False, total, 0, value, d)
    _, xa, value, d = best
    return _outcome(x0, xa, True, total, 0, value, d)


# ---------------------------------------------------------------------------
# Black box


class QueryBudgetExceeded(RuntimeError):
    pass


class BlackBoxOracle:
    """Score-and-decision access to a speaker system, counting queries.

    The threshold and the embedder stay private; callers only see scores
    and decisions.
    """

    def __init__(self, db: SpeakerDatabase, spec: EmbedderSpec, max_queries: int | None = None):
        self._db = db
        self._spec = spec
        self.max_queries = max_queries
        self.queries = 0
        self.task = db.task
        self.speaker_ids = db.speaker_ids

    def __len__(self):
        return len(self._db)

    def _charge(self, n=1):
        if self.max_queries is not None and self.queries + n > self.max_queries:
            raise QueryBudgetExceeded(f"query budget of {self.max_queries} exhausted")
        self.queries += n

    def query(self, x, charge: bool = True):
        """``(scores, decision)`` for one input."""
        if charge:
            self._charge()
        s = self._db.embeddings @ embed(x, self._spec)
        return s, decide(s, self._db)

    def scores(self, x, charge: bool = True):
        return self.query(x, charge)[0]

    def decide(self, x, charge: bool = True):
        return self.query(x, charge)[1]

    def public_db(self, threshold=None) -> SpeakerDatabase:
        """Ids and task only; embeddings are withheld (zeros)."""
        return SpeakerDatabase(self._db.task, self._db.speaker_ids,
                               np.zeros_like(self._db.embeddings), threshold)


def nes_estimate(f, x, m: int, sigma: float, rng) -> np.ndarray:
    """Antithetic NES estimate of ``grad f(x)`` from ``m`` function values."""
    if m < 2 or m % 2:
        raise ValueError("m must be even and >= 2")
    rng = np.random.default_rng(rng)
    x = np.asarray(x, dtype=np.float64)
    half = rng.standard_normal((m // 2, x.size))
    u = np.concatenate([half, -half])
    vals = np.array([f(x + sigma * ui) for ui in u])
    vals = vals - vals.mean()
    return (vals @ u) / (m * sigma)


def nes_gradient(x, loss: str, setting: AttackSetting, db: SpeakerDatabase, spec: EmbedderSpec,
                 m: int, sigma: float, rng, theta=None):
    """NES loss gradient using loss values only. Returns ``(grad, queries_used)``."""
    theta = db.threshold if theta is None else theta

    def f(v):
        return loss_value_and_grad(loss, db.embeddings @ embed(v, spec), setting, theta)[0]

    return nes_estimate(f, as_array(x), m, sigma, rng), m


def _oracle_goal(setting, oracle):
    public = oracle.public_db()
    return lambda d: setting.goal_met(d, public)


def fakebob(x, loss: str, setting: AttackSetting, oracle: BlackBoxOracle, cfg: AttackConfig,
            *, threshold=None, grad_hook=None) -> AttackOutcome:
    """Score-based black-box attack: PGD driven by NES estimates, early stop on success.

    For OSI/SV the threshold is first estimated through the oracle unless
    ``threshold`` is given. ``grad_hook(xs) -> grad`` replaces the NES
    estimator (used to check that the loop matches :func:`pgd`).
    Decision feedback for early stopping is not billed; ``queries_used``
    counts ``m`` per iteration plus threshold-estimation queries.
    """
    x0 = _as_waveform(x)
    theta_queries = 0
    theta = threshold
    if theta is None and setting.task is not TaskKind.CSI:
        before = oracle.queries
        probe_rng = np.random.default_rng([cfg.seed, 7])
        probe = x0.samples
        if oracle.decide(probe, charge=False) != IMPOSTER:
            # an accepted voice cannot serve as probe; fall back to quiet noise
            probe = 0.05 * probe_rng.standard_normal(len(x0))
        est = estimate_threshold(oracle, probe, cfg.threshold_tolerance, rng=probe_rng,
                                 max_queries=cfg.max_queries)
        theta = est.theta
        theta_queries = oracle.queries - before
    goal_d = _oracle_goal(setting, oracle)
    rng = np.random.default_rng(cfg.seed)

    def loss_of(v):
        return loss_value_and_grad(loss, oracle.scores(v, charge=False), setting, theta)[0]

    def grad_fn(xs):
        s, d = oracle.query(xs, charge=False)
        value = loss_value_and_grad(loss, s, setting, theta)[0]
        if grad_hook is not None:
            return value, s, grad_hook(xs)
        if cfg.max_queries is not None and oracle.queries + cfg.nes_samples > cfg.max_queries:
            raise QueryBudgetExceeded("query budget exhausted")
        g = nes_estimate(loss_of, xs, cfg.nes_samples, cfg.nes_sigma, rng)
        oracle.queries += cfg.nes_samples
        return value, s, g

    early = True if cfg.early_stop is None else cfg.early_stop
    xs0 = x0.samples
    x = xs0.copy()
    used = 0
    budget_hit = False
    for _ in range(cfg.iters):
        if early and goal_d(oracle.decide(x, charge=False)):
            break
        try:
            _, _, grad = grad_fn(x)
        except QueryBudgetExceeded:
            budget_hit = True
            break
        if not np.any(grad):
            break
        x = clip_box(xs0, x - cfg.step_size * np.sign(grad), cfg.epsilon)
        used += 1
    s, d = oracle.query(x, charge=False)
    value = loss_value_and_grad(loss, s, setting, theta)[0]
    queries = used * (0 if grad_hook is not None else cfg.nes_samples) + theta_queries
    extra = {"theta_hat": theta} if theta is not None else {}
    if budget_hit:
        extra["budget_exhausted"] = True
    return _outcome(x0, x, goal_d(d), used, queries, value, d, **extra)


@dataclass
class ThresholdEstimate:
    theta: float
    lower: float
    upper: float | None
    queries: int
    converged: bool
    history: list


def _ascent_candidate(xr, g, step, filter_taps):
    norm = np.linalg.norm(g)
    if filter_taps:
        # step along a short FIR colouring of the current point
        return np.clip(xr + convolve_full(xr, -step * g / norm), -1.0, 1.0)
    # L2-normalised stride: RMS change per sample equals step
    return np.clip(xr - step * np.sqrt(g.size) * g / norm, -1.0, 1.0)


def estimate_threshold(oracle: BlackBoxOracle, probe, tolerance: float = 0.01, *,
                       filter_taps: int = 64, step: float | None = None, m: int = 10,
                       sigma: float | None = None, rng=None, max_queries: int | None = 5000,
                       max_bisections: int = 60) -> ThresholdEstimate:
    """Bracket the hidden OSI/SV threshold by pushing a rejected probe upward.

    NES ascent on the top score continues until the oracle accepts; the
    segment between the last rejected and the first accepted input is then
    bisected. The true threshold always lies in ``[lower, upper]`` (highest
    rejected top score, lowest accepted top score); the estimate is their
    midpoint once the bracket is narrower than ``tolerance``.

    With ``filter_taps > 0`` the search runs over a ``filter_taps``-tap FIR
    filter applied to the current point (``x + h * x``) instead of over raw
    samples. Speaker scores depend mostly on the spectral envelope, so the
    low-dimensional search needs far fewer queries. ``filter_taps=0``
    searches raw samples.
    """
    if oracle.task is TaskKind.CSI:
        raise ValueError("CSI systems have no threshold")
    if step is None:
        step = 0.3 if filter_taps else 0.01
    if sigma is None:
        sigma = 0.01 if filter_taps else 0.001
    min_step, max_step = step / 64, step * 4
    rng = np.random.default_rng(rng)
    start = oracle.queries
    xr = as_array(probe).copy()

    def spent():
        return oracle.queries - start

    def budget_left(n):
        return max_queries is None or spent() + n <= max_queries

    s, d = oracle.query(xr)
    if d != IMPOSTER:
        raise ValueError("probe must be rejected by the oracle")
    lower, upper = float(np.max(s)), None
    history = [(lower, upper)]
    xa = None

    def neg_top(v):
        if filter_taps:
            v = xr + convolve_full(xr, v)
        return -float(np.max(oracle.scores(v, charge=False)))

    prev_top = lower
    while xa is None:
        if not budget_left(m + 1):
            return ThresholdEstimate(lower, lower, None, spent(), False, history)
        at = np.zeros(filter_taps) if filter_taps else xr
        g = nes_estimate(neg_top, at, m, sigma, rng)
        oracle.queries += m
        if not np.any(g):
            step = max(step * 0.5, min_step)
            continue
        cand = _ascent_candidate(xr, g, step, filter_taps)
        s, d = oracle.query(cand)
        top_s = float(np.max(s))
        if d != IMPOSTER:
            xa = cand
            upper = top_s
        else:
            lower = max(lower, top_s)
            if top_s > prev_top:
                xr, prev_top = cand, top_s
                step = min(step * 1.5, max_step)
            else:
                step = max(step * 0.5, min_step)
        history.append((lower, upper))

    for _ in range(max_bisections):
        if upper - lower < tolerance or not budget_left(1):
            break
        mid = 0.5 * (xr + xa)
        s, d = oracle.query(mid)
        top_s = float(np.max(s))
        if d == IMPOSTER:
            xr = mid
            lower = max(lower, top_s)
        else:
            xa = mid
            upper = min(upper, top_s)
        history.append((lower, upper))
    converged = upper - lower < tolerance
    return ThresholdEstimate(0.5 * (lower + upper), lower, upper, spent(), converged, history)
