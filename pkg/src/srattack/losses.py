"""Source/target-oriented attack losses over speaker score vectors.

Every loss is minimised by the attacks. Losses that carry a threshold or a
max-term are arranged so that ``loss <= 0`` coincides with the attack goal;
those are the ones the CW2 optimiser may use (its objective clamps the loss
at ``-kappa``).
"""

from __future__ import annotations

from dataclasses import dataclass

import numpy as np

from .audio import as_array
from .srs import IMPOSTER, EmbedderSpec, SpeakerDatabase, TaskKind, embed_with_vjp

ENROLLED = "enrolled"
UNTARGETED = "untargeted"

# id -> (task, source enrolled, target kind)
SETTINGS = {
    "C1": (TaskKind.OSI, True, ENROLLED),
    "C2": (TaskKind.OSI, False, ENROLLED),
    "C3": (TaskKind.OSI, True, IMPOSTER),
    "C4": (TaskKind.OSI, True, UNTARGETED),
    "C5": (TaskKind.OSI, False, UNTARGETED),
    "C6": (TaskKind.CSI, True, ENROLLED),
    "C7": (TaskKind.CSI, False, ENROLLED),
    "C8": (TaskKind.CSI, True, UNTARGETED),
    "C9": (TaskKind.SV, True, IMPOSTER),
    "C10": (TaskKind.SV, False, ENROLLED),
}

LOSS_NAMES = ("CE", "M", "L1", "L2", "CEs", "L1s", "L3", "Ms", "L2s", "L4s",
              "L3neg", "BCE", "L3B", "BCEp", "L3Bneg")

# (loss, cw eligible) per setting
_SETTING_LOSSES = {
    "C1": (("CE", False), ("M", False), ("L1", False), ("L2", True)),
    "C3": (("CEs", False), ("L1s", False), ("L3", True)),
    # the rejection route of C4 is the C3 problem, so L3 rides along
    "C4": (("CEs", False), ("L1s", False), ("Ms", False), ("L2s", True), ("L4s", False),
           ("L3", True)),
    "C5": (("L3neg", True),),
    "C6": (("CE", False), ("M", True), ("L1", False)),
    "C8": (("CEs", False), ("Ms", True), ("L1s", False), ("L4s", False)),
    "C9": (("BCE", False), ("L3B", True)),
    "C10": (("BCEp", False), ("L3Bneg", True)),
}
_SETTING_LOSSES["C2"] = _SETTING_LOSSES["C1"]
_SETTING_LOSSES["C7"] = _SETTING_LOSSES["C6"]

_USES_THETA = {"L2", "L3", "L2s", "L3neg", "L3B", "L3Bneg"}


class LossSettingError(ValueError):
    pass


@dataclass(frozen=True)
class AttackSetting:
    """A source/target combination with resolved speaker indices.

    ``source`` is the index in the enrolled group when the source speaker is
    enrolled; ``target`` is the index of the target speaker for settings
    aiming at an enrolled speaker. SV settings use index 0 for the single
    enrolled speaker.
    """

    id: str
    source: int | None = None
    target: int | None = None

    def __post_init__(self):
        if self.id not in SETTINGS:
            raise LossSettingError(f"unknown setting {self.id!r}")
        task, src_enrolled, target = SETTINGS[self.id]
        source, tgt = self.source, self.target
        if task is TaskKind.SV:
            source = 0 if src_enrolled else None
            tgt = 0 if target == ENROLLED else None
            object.__setattr__(self, "source", source)
            object.__setattr__(self, "target", tgt)
        if src_enrolled and source is None:
            raise LossSettingError(f"{self.id} needs the enrolled source index")
        if not src_enrolled and source is not None:
            raise LossSettingError(f"{self.id} has an unenrolled source")
        if target == ENROLLED and tgt is None:
            raise LossSettingError(f"{self.id} needs a target index")
        if target != ENROLLED and tgt is not None:
            raise LossSettingError(f"{self.id} does not take a target speaker")
        if src_enrolled and target == ENROLLED and source == tgt:
            raise LossSettingError("target must differ from the source speaker")

    @property
    def task(self) -> TaskKind:
        return SETTINGS[self.id][0]

    @property
    def source_enrolled(self) -> bool:
        return SETTINGS[self.id][1]

    @property
    def target_kind(self) -> str:
        return SETTINGS[self.id][2]

    @property
    def targeted(self) -> bool:
        return self.target_kind != UNTARGETED

    def check_db(self, db: SpeakerDatabase) -> None:
        if db.task is not self.task:
            raise LossSettingError(f"{self.id} is a {self.task.value} setting, database is "
                                   f"{db.task.value}")
        for idx in (self.source, self.target):
            if idx is not None and not 0 <= idx < len(db):
                raise LossSettingError(f"speaker index {idx} out of range")

    def goal_met(self, decision, db: SpeakerDatabase) -> bool:
        """Whether a decision satisfies this setting's attack goal."""
        kind = self.target_kind
        if kind == ENROLLED:
            return decision == db.speaker_ids[self.target]
        if kind == IMPOSTER:
            return decision == IMPOSTER
        if self.source_enrolled:
            return decision != db.speaker_ids[self.source]
        return decision != IMPOSTER


def losses_for_setting(setting) -> list:
    """``[(loss name, cw eligible), ...]`` applicable to a setting (or setting id)."""
    sid = setting.id if isinstance(setting, AttackSetting) else str(setting)
    if sid not in _SETTING_LOSSES:
        raise LossSettingError(f"unknown setting {sid!r}")
    return list(_SETTING_LOSSES[sid])


def parse_loss_key(key: str):
    """Split a canonical ``"C8:Ms"`` name into ``("C8", "Ms")`` after validation."""
    sid, _, loss = key.partition(":")
    check_applicable(loss, sid)
    return sid, loss


def loss_key(setting, loss: str) -> str:
    sid = setting.id if isinstance(setting, AttackSetting) else setting
    return f"{sid}:{loss}"


def check_applicable(loss: str, setting) -> None:
    if loss not in LOSS_NAMES:
        raise LossSettingError(f"unknown loss {loss!r}")
    if loss not in dict(losses_for_setting(setting)):
        sid = setting.id if isinstance(setting, AttackSetting) else setting
        raise LossSettingError(f"loss {loss} does not apply to setting {sid}")


def is_cw_eligible(loss: str, setting) -> bool:
    return dict(losses_for_setting(setting)).get(loss, False)


def _log_softmax(s):
    m = s.max()
    return s - m - np.log(np.sum(np.exp(s - m)))


def _max_excluding(s, k):
    """``(value, index)`` of the largest score other than ``k`` (lowest index on ties)."""
    masked = np.where(np.arange(s.size) == k, -np.inf, s)
    i = int(np.argmax(masked))
    return masked[i], i


def _sigmoid(v):
    return 0.5 * (1.0 + np.tanh(0.5 * v))


def loss_value_and_grad(loss: str, scores, setting: AttackSetting, theta=None):
    """Loss value and its (sub)gradient with respect to the score vector."""
    check_applicable(loss, setting)
    s = np.atleast_1d(np.asarray(scores, dtype=np.float64))
    if loss in _USES_THETA and theta is None:
        raise LossSettingError(f"loss {loss} needs a threshold")
    g = np.zeros_like(s)
    t, src = setting.target, setting.source

    if loss == "CE":
        ls = _log_softmax(s)
        g = np.exp(ls)
        g[t] -= 1.0
        return float(-ls[t]), g
    if loss == "CEs":
        ls = _log_softmax(s)
        g = -np.exp(ls)
        g[src] += 1.0
        return float(ls[src]), g
    if loss == "L1":
        g[t] = -1.0
        return float(-s[t]), g
    if loss == "L1s":
        g[src] = 1.0
        return float(s[src]), g
    if loss == "M":
        m, j = _max_excluding(s, t)
        g[j] += 1.0
        g[t] -= 1.0
        return float(m - s[t]), g
    if loss == "L2":
        m, j = _max_excluding(s, t)
        if m > theta:
            g[j] += 1.0
        g[t] -= 1.0
        return float(max(theta, m) - s[t]), g
    if loss == "L3":
        j = int(np.argmax(s))
        g[j] = 1.0
        return float(s[j] - theta), g
    if loss == "L3neg":
        j = int(np.argmax(s))
        g[j] = -1.0
        return float(theta - s[j]), g
    if loss == "Ms":
        m, j = _max_excluding(s, src)
        g[src] += 1.0
        g[j] -= 1.0
        return float(s[src] - m), g
    if loss == "L2s":
        m, j = _max_excluding(s, src)
        if s[src] > theta:
            g[src] += 1.0
        g[j] -= 1.0
        return float(max(theta, s[src]) - m), g
    if loss == "L4s":
        m, j = _max_excluding(s, src)
        g[j] = -1.0
        return float(-m), g
    # SV losses on the single score
    v = s[0]
    if loss == "BCE":
        g[0] = _sigmoid(v)
        return float(np.logaddexp(0.0, v)), g
    if loss == "BCEp":
        g[0] = _sigmoid(v) - 1.0
        return float(np.logaddexp(0.0, -v)), g
    if loss == "L3B":
        g[0] = 1.0
        return float(v - theta), g
    if loss == "L3Bneg":
        g[0] = -1.0
        return float(theta - v), g
    raise LossSettingError(f"unhandled loss {loss}")  # pragma: no cover


def eval_loss(loss: str, scores, setting: AttackSetting, theta=None) -> float:
    return loss_value_and_grad(loss, scores, setting, theta)[0]


def loss_grad_scores(loss: str, scores, setting: AttackSetting, theta=None) -> np.ndarray:
    return loss_value_and_grad(loss, scores, setting, theta)[1]


def input_loss_value_and_grad(loss: str, x, db: SpeakerDatabase, spec: EmbedderSpec,
                              setting: AttackSetting, theta=None):
    """``(loss, scores, d loss / d x)`` through cosine scoring and the embedder."""
    theta = db.threshold if theta is None else theta
    e, vjp = embed_with_vjp(x, spec)
    scores = db.embeddings @ e
    value, g_scores = loss_value_and_grad(loss, scores, setting, theta)
    if not np.any(g_scores):
        return value, scores, np.zeros(as_array(x).size)
    return value, scores, vjp(db.embeddings.T @ g_scores)


def input_loss_grad(loss: str, x, db: SpeakerDatabase, spec: EmbedderSpec,
                    setting: AttackSetting, theta=None) -> np.ndarray:
    return input_loss_value_and_grad(loss, x, db, spec, setting, theta)[2]
