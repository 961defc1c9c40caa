"""Metrics, target selection, transfer matrices and the end-to-end experiment runner."""

from __future__ import annotations

import csv
import io
import json
import logging
import math
import time
from concurrent.futures import ProcessPoolExecutor
from dataclasses import asdict, dataclass, field, replace
from pathlib import Path

import numpy as np
from scipy.stats import spearmanr

from .attack import AttackConfig, BlackBoxOracle, cw2, fakebob, fgsm, pgd
from .audio import (PCM_SCALE, Waveform, as_array, generate_corpus, load_wav, quantize,
                    store_wav)
from .losses import (AttackSetting, SETTINGS, ENROLLED, UNTARGETED, check_applicable,
                     input_loss_grad)
from .ota import (NoiseKind, TransformKind, TransformSet, make_rir_pool, robust_attack,
                  robust_config, transmit)
from .srs import (IMPOSTER, EmbedderSpec, SpeakerDatabase, TaskKind, decide, enroll, score,
                  tune_threshold_eer)

log = logging.getLogger(__name__)

# loss used when the config does not name one
BEST_LOSS = {
    "C1": "L1", "C2": "L1", "C3": "L3", "C4": "L2s", "C5": "L3neg",
    "C6": "M", "C7": "CE", "C8": "Ms", "C9": "L3B", "C10": "L3Bneg",
}


def _pct(num, den):
    return None if den == 0 else 100.0 * num / den


# ---------------------------------------------------------------------------
# Metrics


def compute_rates(trials) -> dict:
    """Benign-performance rates (percent) from ``(truth, decision[, score])`` trials.

    ``truth`` is an enrolled speaker id or :data:`IMPOSTER` for an unenrolled
    voice. Rates over an empty group are ``None`` rather than 0.
    """
    trials = list(trials)
    if not trials:
        raise ValueError("no trials")
    enrolled = [(t[0], t[1]) for t in trials if t[0] != IMPOSTER]
    unenrolled = [(t[0], t[1]) for t in trials if t[0] == IMPOSTER]
    correct = sum(t[1] == t[0] for t in trials)
    rejected = sum(d == IMPOSTER for _, d in enrolled)
    misid = sum(d != IMPOSTER and d != t for t, d in enrolled)
    accepted = sum(d != IMPOSTER for _, d in unenrolled)
    return {
        "Acc": _pct(correct, len(trials)),
        "FAR": _pct(accepted, len(unenrolled)),
        "FRR": _pct(rejected, len(enrolled)),
        "IER": _pct(misid, len(enrolled)),
        "n_enrolled": len(enrolled),
        "n_unenrolled": len(unenrolled),
    }


def _decision_of(item):
    if isinstance(item, dict):
        return item["decision"]
    return item.decision


def compute_asr(items, speaker_ids) -> dict:
    """Attack success rates (percent) over ``(AttackSetting, outcome-or-decision)`` pairs.

    ``ASR_t`` counts the exact target decision (``None`` for untargeted
    settings). ``ASR_u`` counts misbehaviour: for an enrolled source any
    decision other than the source, for an unenrolled source any acceptance.
    C4 additionally reports its rejection and misidentification sub-rates.
    """
    items = list(items)
    if not items:
        raise ValueError("no outcomes")
    sids = {s.id for s, _ in items}
    if len(sids) != 1:
        raise ValueError(f"outcomes mix settings {sorted(sids)}")
    sid = sids.pop()
    task, src_enrolled, target_kind = SETTINGS[sid]
    hits_t = hits_u = rej = mis = 0
    for setting, item in items:
        d = item if isinstance(item, str) else _decision_of(item)
        if target_kind == ENROLLED:
            hits_t += d == speaker_ids[setting.target]
        elif target_kind == IMPOSTER:
            hits_t += d == IMPOSTER
        if src_enrolled:
            hits_u += d != speaker_ids[setting.source]
            rej += d == IMPOSTER
            mis += d != IMPOSTER and d != speaker_ids[setting.source]
        else:
            hits_u += d != IMPOSTER
    n = len(items)
    out = {
        "setting": sid,
        "n": n,
        "ASR_t": None if target_kind == UNTARGETED else _pct(hits_t, n),
        "ASR_u": _pct(hits_u, n),
    }
    if sid == "C4":
        out["ASR_u_reject"] = _pct(rej, n)
        out["ASR_u_misid"] = _pct(mis, n)
    return out


def stealth_metrics(x, x_adv) -> dict:
    """``L2``, ``Linf`` and ``SNR_db`` of the perturbation ``x_adv - x``."""
    xs, xa = as_array(x), as_array(x_adv)
    if xs.shape != xa.shape:
        raise ValueError("length mismatch")
    delta = xa - xs
    p_delta = float(np.mean(delta ** 2))
    snr = math.inf if p_delta == 0 else 10.0 * math.log10(float(np.mean(xs ** 2)) / p_delta)
    return {"L2": float(np.linalg.norm(delta)), "Linf": float(np.max(np.abs(delta))),
            "SNR_db": snr}


def select_target(policy: str, source, scores, rng=None) -> int:
    """Target index for a voice.

    ``policy`` is ``"random"`` (seeded uniform draw over the enrolled group
    minus the source), ``"least-likely"`` (lowest score over the same group)
    or ``"fixed:<index>"``. ``source`` is an index or ``None`` for an
    unenrolled source.
    """
    scores = np.atleast_1d(np.asarray(scores, dtype=np.float64))
    n = scores.size
    if policy.startswith("fixed:"):
        t = int(policy.split(":", 1)[1])
        if not 0 <= t < n:
            raise ValueError(f"fixed target {t} out of range")
        if source is not None and t == source:
            raise ValueError("fixed target equals the source speaker")
        return t
    pool = [i for i in range(n) if i != source]
    if not pool:
        raise ValueError("need at least two enrolled speakers")
    if policy == "random":
        rng = np.random.default_rng(rng)
        return int(pool[int(rng.integers(len(pool)))])
    if policy == "least-likely":
        return int(pool[int(np.argmin(scores[pool]))])
    raise ValueError(f"unknown target policy {policy!r}")


# ---------------------------------------------------------------------------
# Corpus split and systems


@dataclass
class Split:
    """Enrollment/test/imposter utterances as ``{speaker_id: [Waveform, ...]}``."""

    enroll: dict
    test: dict
    imposter: dict

    @property
    def speaker_ids(self):
        return list(self.enroll)


def _pcm_roundtrip(w: Waveform) -> Waveform:
    return w.with_samples(quantize(w.samples).astype(np.float64) / PCM_SCALE)


def _child_seed(*parts) -> int:
    return int(np.random.SeedSequence([int(p) for p in parts]).generate_state(1)[0])


def make_split(num_speakers=10, enroll_per_speaker=3, test_per_speaker=3, num_imposters=5,
               imposter_utterances=2, duration_s=0.5, master_seed=0,
               sample_rate=16000) -> Split:
    """Deterministic corpus split; samples pass through 16-bit PCM so files match memory."""
    spk = generate_corpus(num_speakers, enroll_per_speaker + test_per_speaker, duration_s,
                          master_seed, sample_rate, prefix="spk")
    imp = generate_corpus(num_imposters, imposter_utterances, duration_s,
                          _child_seed(master_seed, 99), sample_rate, prefix="imp")
    rt = {k: [_pcm_roundtrip(w) for w in v] for k, v in spk.items()}
    return Split({k: v[:enroll_per_speaker] for k, v in rt.items()},
                 {k: v[enroll_per_speaker:] for k, v in rt.items()},
                 {k: [_pcm_roundtrip(w) for w in v] for k, v in imp.items()})


def build_system(split: Split, spec: EmbedderSpec, task, sv_speaker: int = 0) -> SpeakerDatabase:
    """Enroll and, for OSI/SV, set the EER threshold from test and imposter voices."""
    db = enroll_for(split, spec, task, sv_speaker)
    if db.task is TaskKind.CSI:
        return db
    theta, _ = tune_threshold_eer(*genuine_imposter_scores(split, db, spec))
    return db.with_threshold(theta)


def enroll_for(split: Split, spec: EmbedderSpec, task, sv_speaker: int = 0) -> SpeakerDatabase:
    """Enroll every speaker (OSI/CSI) or the single ``sv_speaker`` (SV); no threshold yet."""
    task = TaskKind(task)
    if task is TaskKind.SV:
        sid = split.speaker_ids[sv_speaker]
        return enroll({sid: split.enroll[sid]}, spec, task)
    return enroll(split.enroll, spec, task)


def genuine_imposter_scores(split: Split, db: SpeakerDatabase, spec: EmbedderSpec):
    """Target-trial scores and non-target top scores for threshold tuning."""
    genuine, imposter = [], []
    enrolled = set(db.speaker_ids)
    for sid, utts in split.test.items():
        for w in utts:
            s = score(w, db, spec)
            if sid in enrolled:
                genuine.append(float(s[db.index(sid)]))
            else:
                imposter.append(float(np.max(s)))
    for utts in split.imposter.values():
        imposter.extend(float(np.max(score(w, db, spec))) for w in utts)
    return genuine, imposter


def benign_trials(split: Split, db: SpeakerDatabase, spec: EmbedderSpec):
    """``(truth, decision, top score)`` for every test voice; CSI skips unenrolled voices."""
    enrolled = set(db.speaker_ids)
    trials = []
    groups = list(split.test.items()) + list(split.imposter.items())
    if db.task is TaskKind.CSI:
        groups = [(sid, u) for sid, u in groups if sid in enrolled]
    for sid, utts in groups:
        for w in utts:
            s = score(w, db, spec)
            truth = sid if sid in enrolled else IMPOSTER
            trials.append((truth, decide(s, db), float(np.max(s))))
    return trials


@dataclass
class Voice:
    voice_id: str
    wave: Waveform
    setting: AttackSetting
    seed: int


def attack_voices(split: Split, db: SpeakerDatabase, spec: EmbedderSpec, setting_id: str,
                  policy: str = "random", master_seed: int = 0, max_voices=None):
    """Voices for a setting with resolved source/target indices and per-voice seeds."""
    task, src_enrolled, target_kind = SETTINGS[setting_id]
    if TaskKind(task) is not db.task:
        raise ValueError(f"{setting_id} needs a {task.value} database")
    enrolled = set(db.speaker_ids)
    pool = []
    for sid, utts in split.test.items():
        if (sid in enrolled) == src_enrolled:
            pool.extend((sid, j, w) for j, w in enumerate(utts))
    if not src_enrolled:
        for sid, utts in split.imposter.items():
            pool.extend((sid, j, w) for j, w in enumerate(utts))
    voices = []
    for k, (sid, j, w) in enumerate(pool):
        seed = _child_seed(master_seed, 7, k)
        source = db.index(sid) if src_enrolled else None
        target = None
        if target_kind == ENROLLED and db.task is not TaskKind.SV:
            target = select_target(policy, source, score(w, db, spec), seed)
        voices.append(Voice(f"{sid}_{j:02d}", w, AttackSetting(setting_id, source, target), seed))
    return voices[:max_voices] if max_voices else voices


# ---------------------------------------------------------------------------
# Transferability


def run_attack(voice: Voice, loss: str, db: SpeakerDatabase, spec: EmbedderSpec,
               cfg: AttackConfig):
    """Dispatch on ``cfg.optimizer`` with the voice's own seed."""
    cfg = replace(cfg, seed=voice.seed)
    if cfg.optimizer == "FGSM":
        return fgsm(voice.wave, loss, voice.setting, db, spec, cfg)
    if cfg.optimizer == "PGD":
        return pgd(voice.wave, loss, voice.setting, db, spec, cfg)
    if cfg.optimizer == "CW2":
        return cw2(voice.wave, loss, voice.setting, db, spec, cfg)
    oracle = BlackBoxOracle(db, spec, cfg.max_queries)
    return fakebob(voice.wave, loss, voice.setting, oracle, cfg)


def _setting_rate(setting_id, items, speaker_ids):
    r = compute_asr(items, speaker_ids)
    return r["ASR_u"] if r["ASR_t"] is None else r["ASR_t"]


def transfer_matrix(models, split: Split, setting_id: str, cfg: AttackConfig, loss=None,
                    policy="random", master_seed=0, max_voices=None) -> dict:
    """Self and transfer attack effect for every (source model, target model) pair.

    Each cell is the success-rate increase on the target model over its
    benign rate (ASR_t for targeted settings, ASR_u otherwise), in percent;
    for CSI untargeted this is the accuracy drop. Targets are chosen on the
    first model and reused everywhere so rows are comparable.
    """
    if len(models) < 2:
        raise ValueError("need at least two models")
    loss = loss or BEST_LOSS[setting_id]
    task = SETTINGS[setting_id][0]
    dbs = [build_system(split, m, task) for m in models]
    voices = attack_voices(split, dbs[0], models[0], setting_id, policy, master_seed, max_voices)
    ids = dbs[0].speaker_ids

    def rate(db, spec, waves):
        items = [(v.setting, decide(score(w, db, spec), db)) for v, w in zip(voices, waves)]
        return _setting_rate(setting_id, items, ids)

    benign = [rate(db, m, [v.wave for v in voices]) for db, m in zip(dbs, models)]
    n = len(models)
    cells = np.zeros((n, n))
    adv_by_source = []
    for i, (db_i, m_i) in enumerate(zip(dbs, models)):
        advs = [run_attack(v, loss, db_i, m_i, cfg).adversarial for v in voices]
        adv_by_source.append(advs)
        for j, (db_j, m_j) in enumerate(zip(dbs, models)):
            cells[i, j] = rate(db_j, m_j, advs) - benign[j]
    asym = [(i, j, float(cells[i, j] - cells[j, i]))
            for i in range(n) for j in range(i + 1, n)]
    grad = [input_gradient_size(m, db, loss, voices, cfg.epsilon) for m, db in zip(models, dbs)]
    return {"models": [m.name for m in models], "setting": setting_id, "loss": loss,
            "benign_rate": benign, "matrix": cells, "asymmetry": asym,
            "gradient_size": grad, "n_voices": len(voices)}


def input_gradient_size(spec: EmbedderSpec, db: SpeakerDatabase, loss: str, voices,
                        epsilon: float = 0.002, scale: float = 1.0) -> dict:
    """Mean ``||grad_x L||_1`` over voices and the first-order transfer bound ``eps * ||grad||_1``.

    ``voices`` is a list of :class:`Voice` (or ``(setting, waveform)`` pairs).
    ``scale`` multiplies the loss, for checking homogeneity.
    """
    norms = []
    for v in voices:
        setting, wave = (v.setting, v.wave) if isinstance(v, Voice) else v
        check_applicable(loss, setting)
        g = input_loss_grad(loss, wave, db, spec, setting)
        norms.append(float(np.abs(scale * g).sum()))
    mean = float(np.mean(norms)) if norms else 0.0
    return {"model": spec.name, "gradient_l1": mean, "transfer_bound": epsilon * mean}


def spearman(a, b) -> float:
    """Rank correlation (average ranks on ties)."""
    return float(spearmanr(a, b).statistic)


# ---------------------------------------------------------------------------
# Experiment config


@dataclass
class CorpusConfig:
    num_speakers: int = 10
    enroll_per_speaker: int = 3
    test_per_speaker: int = 3
    num_imposters: int = 5
    imposter_utterances: int = 2
    duration_s: float = 0.5
    sample_rate: int = 16000


@dataclass
class RobustConfig:
    kind: str = "NoiseAndRir"
    snr_lo_db: float = 0.0
    snr_hi_db: float = 20.0
    noise_dist: str = "white-gaussian"
    snr_after_reverb: bool = True
    K: int = 10
    iters: int = 400
    lam: float = 0.0
    num_rirs: int = 20


@dataclass
class OtaEvalConfig:
    num_rirs: int = 10
    noise_kinds: list = field(default_factory=lambda: ["white-gaussian"])
    snr_db: list = field(default_factory=lambda: [20, 15, 10, 5, 0])
    repeats: int = 2


@dataclass
class ExperimentConfig:
    """Everything a run needs; JSON keys mirror the field names (see README)."""

    name: str = "experiment"
    master_seed: int = 0
    corpus: CorpusConfig = field(default_factory=CorpusConfig)
    models: list = field(default_factory=lambda: [EmbedderSpec()])
    setting: str = "C8"
    loss: str | None = None
    target_policy: str = "random"
    attack: AttackConfig = field(default_factory=AttackConfig)
    robust: RobustConfig = field(default_factory=RobustConfig)
    ota: OtaEvalConfig = field(default_factory=OtaEvalConfig)
    max_voices: int | None = None
    workers: int = 1
    output_dir: str = "out"

    def __post_init__(self):
        if self.setting not in SETTINGS:
            raise ValueError(f"unknown setting {self.setting!r}")
        if self.target_policy not in ("random", "least-likely") and \
                not self.target_policy.startswith("fixed:"):
            raise ValueError(f"unknown target policy {self.target_policy!r}")
        if self.target_policy != "random" and SETTINGS[self.setting][2] != ENROLLED:
            raise ValueError("target policies apply to enrolled-target settings only")
        if not self.models:
            raise ValueError("at least one model is required")
        check_applicable(self.resolved_loss, self.setting)

    @property
    def task(self) -> TaskKind:
        return SETTINGS[self.setting][0]

    @property
    def resolved_loss(self) -> str:
        return self.loss or BEST_LOSS[self.setting]

    def to_dict(self) -> dict:
        d = asdict(self)
        d["models"] = [m.to_dict() for m in self.models]
        d["attack"] = self.attack.to_dict()
        return d

    @classmethod
    def from_dict(cls, d: dict) -> "ExperimentConfig":
        d = dict(d)
        known = set(cls.__dataclass_fields__)
        unknown = set(d) - known
        if unknown:
            raise ValueError(f"unknown config keys {sorted(unknown)}")
        if "corpus" in d:
            d["corpus"] = CorpusConfig(**d["corpus"])
        if "robust" in d:
            d["robust"] = RobustConfig(**d["robust"])
        if "ota" in d:
            d["ota"] = OtaEvalConfig(**d["ota"])
        if "attack" in d:
            d["attack"] = AttackConfig(**d["attack"])
        if "models" in d:
            d["models"] = [EmbedderSpec.from_dict(m) for m in d["models"]]
        return cls(**d)

    @classmethod
    def load(cls, path) -> "ExperimentConfig":
        return cls.from_dict(json.loads(Path(path).read_text()))


# ---------------------------------------------------------------------------
# Report writing


def _fmt(v):
    if v is None:
        return ""
    if isinstance(v, float):
        if math.isinf(v):
            return "inf" if v > 0 else "-inf"
        return f"{v:.6f}"
    return str(v)


def write_csv(path, rows, columns) -> None:
    buf = io.StringIO()
    w = csv.writer(buf, lineterminator="\n")
    w.writerow(columns)
    for r in rows:
        w.writerow([_fmt(r.get(c)) for c in columns])
    Path(path).write_text(buf.getvalue())


def _json_default(o):
    if isinstance(o, (np.floating, np.integer)):
        return o.item()
    if isinstance(o, np.ndarray):
        return o.tolist()
    raise TypeError(type(o))


def _clean(v):
    if isinstance(v, float) and math.isinf(v):
        return "inf" if v > 0 else "-inf"
    if isinstance(v, dict):
        return {k: _clean(x) for k, x in v.items()}
    return v


def write_jsonl(path, records) -> None:
    lines = [json.dumps(_clean(r), sort_keys=True, default=_json_default) for r in records]
    Path(path).write_text("".join(line + "\n" for line in lines))


def read_jsonl(path):
    return [json.loads(line) for line in Path(path).read_text().splitlines() if line.strip()]


SUMMARY_COLUMNS = ["experiment", "model", "setting", "loss", "optimizer", "n", "ASR_t", "ASR_u",
                   "ASR_u_reject", "ASR_u_misid", "mean_L2", "mean_Linf", "mean_SNR_db",
                   "mean_queries", "PESQ"]


def summarize(records, experiment: str, speaker_ids) -> list:
    """One summary row per (model, setting, loss, optimizer) group of per-voice records."""
    groups = {}
    for r in records:
        groups.setdefault((r["model"], r["setting"], r["loss"], r["optimizer"]), []).append(r)
    rows = []
    for (model, sid, loss, opt), recs in sorted(groups.items()):
        items = [(AttackSetting(sid, r["source"], r["target"]), r["decision"]) for r in recs]
        asr = compute_asr(items, speaker_ids)
        snrs = [r["snr_db"] for r in recs if r["snr_db"] != "inf"]
        rows.append({
            "experiment": experiment, "model": model, "setting": sid, "loss": loss,
            "optimizer": opt, "n": len(recs), "ASR_t": asr["ASR_t"], "ASR_u": asr["ASR_u"],
            "ASR_u_reject": asr.get("ASR_u_reject"), "ASR_u_misid": asr.get("ASR_u_misid"),
            "mean_L2": float(np.mean([r["l2"] for r in recs])),
            "mean_Linf": float(np.mean([r["linf"] for r in recs])),
            "mean_SNR_db": float(np.mean(snrs)) if snrs else math.inf,
            "mean_queries": float(np.mean([r["queries"] for r in recs])),
            "PESQ": None,
        })
    return rows


# ---------------------------------------------------------------------------
# Pipeline stages


class StageError(RuntimeError):
    def __init__(self, stage, exc):
        super().__init__(f"[{stage}] {exc}")
        self.stage = stage


class Experiment:
    """Stage runner; every stage writes into ``cfg.output_dir`` deterministically."""

    def __init__(self, cfg: ExperimentConfig):
        self.cfg = cfg
        self.out = Path(cfg.output_dir)
        self._split = None
        self._dbs = {}
        self.timings = {}

    # shared state

    @property
    def split(self) -> Split:
        if self._split is None:
            c = self.cfg.corpus
            self._split = make_split(c.num_speakers, c.enroll_per_speaker, c.test_per_speaker,
                                     c.num_imposters, c.imposter_utterances, c.duration_s,
                                     self.cfg.master_seed, c.sample_rate)
        return self._split

    def system(self, i: int = 0) -> SpeakerDatabase:
        if i not in self._dbs:
            path = self.out / "systems" / f"{self.cfg.models[i].name}.json"
            if path.is_file():
                self._dbs[i] = SpeakerDatabase.load(path)
            else:
                self._dbs[i] = build_system(self.split, self.cfg.models[i], self.cfg.task)
        return self._dbs[i]

    def voices(self, i: int = 0):
        return attack_voices(self.split, self.system(i), self.cfg.models[i], self.cfg.setting,
                             self.cfg.target_policy, self.cfg.master_seed, self.cfg.max_voices)

    def _stage(self, name, fn):
        t0 = time.perf_counter()
        try:
            result = fn()
        except Exception as exc:  # tag and re-raise
            raise StageError(name, exc) from exc
        self.timings[name] = time.perf_counter() - t0
        log.info("stage %s done in %.2fs", name, self.timings[name])
        return result

    # stages

    def gen_corpus(self):
        def run():
            root = self.out / "corpus"
            manifest = []
            for part in ("enroll", "test", "imposter"):
                for sid, utts in getattr(self.split, part).items():
                    for j, w in enumerate(utts):
                        rel = f"{part}/{sid}_{j:02d}.wav"
                        store_wav(w, root / rel)
                        manifest.append({"part": part, "speaker": sid, "index": j, "file": rel})
            write_jsonl(root / "manifest.jsonl", manifest)
            return manifest
        return self._stage("gen-corpus", run)

    def enroll(self):
        def run():
            d = self.out / "systems"
            d.mkdir(parents=True, exist_ok=True)
            for i, m in enumerate(self.cfg.models):
                enroll_for(self.split, m, self.cfg.task).save(d / f"{m.name}.json")
                self._dbs.pop(i, None)
        return self._stage("enroll", run)

    def tune_threshold(self):
        def run():
            d = self.out / "systems"
            d.mkdir(parents=True, exist_ok=True)
            rows = []
            for i, m in enumerate(self.cfg.models):
                path = d / f"{m.name}.json"
                db = SpeakerDatabase.load(path) if path.is_file() else \
                    enroll_for(self.split, m, self.cfg.task)
                if db.task is not TaskKind.CSI:
                    gen, imp = genuine_imposter_scores(self.split, db, m)
                    theta, eer = tune_threshold_eer(gen, imp)
                    db = db.with_threshold(theta)
                else:
                    theta, eer = None, None
                db.save(path)
                self._dbs[i] = db
                rates = compute_rates(benign_trials(self.split, db, m))
                rows.append({"model": m.name, "task": db.task.value, "threshold": theta,
                             "EER": None if eer is None else 100 * eer, **rates})
            write_csv(d / "thresholds.csv", rows,
                      ["model", "task", "threshold", "EER", "Acc", "FAR", "FRR", "IER"])
            return rows
        return self._stage("tune-threshold", run)

    def _records(self, voices, outcomes, model, optimizer, extra=None):
        recs = []
        for v, o in zip(voices, outcomes):
            st = stealth_metrics(v.wave, o.adversarial)
            rec = o.record(voice=v.voice_id, model=model, setting=v.setting.id,
                           loss=self.cfg.resolved_loss, optimizer=optimizer,
                           source=v.setting.source, target=v.setting.target,
                           snr_db=st["SNR_db"], seed=v.seed)
            rec.update(extra or {})
            recs.append(rec)
        return recs

    def _map(self, fn, items):
        if self.cfg.workers > 1:
            with ProcessPoolExecutor(self.cfg.workers) as ex:
                return list(ex.map(fn, items))
        return [fn(v) for v in items]

    def attack(self):
        def run():
            d = self.out / "attack"
            db, spec = self.system(0), self.cfg.models[0]
            voices = self.voices(0)
            job = _AttackJob(self.cfg.resolved_loss, db, spec, self.cfg.attack)
            outcomes = self._map(job, voices)
            self._write_adv(d, voices, outcomes)
            recs = self._records(voices, outcomes, spec.name, self.cfg.attack.optimizer)
            write_jsonl(d / "records.jsonl", recs)
            write_csv(d / "summary.csv", summarize(recs, self.cfg.name, db.speaker_ids),
                      SUMMARY_COLUMNS)
            return recs
        return self._stage("attack", run)

    def robust_attack(self):
        def run():
            d = self.out / "robust"
            db, spec = self.system(0), self.cfg.models[0]
            voices = self.voices(0)
            rc = self.cfg.robust
            pool = []
            if TransformKind(rc.kind) in (TransformKind.RIR, TransformKind.NOISE_RIR):
                _, pool = make_rir_pool(rc.num_rirs, _child_seed(self.cfg.master_seed, 31),
                                        "train", self.cfg.corpus.sample_rate)
            tset = TransformSet(rc.kind, rc.snr_lo_db, rc.snr_hi_db, rc.noise_dist, pool,
                                rc.snr_after_reverb)
            acfg = self.cfg.attack
            cfg = robust_config(acfg.epsilon, rc.iters, seed=acfg.seed)
            job = _RobustJob(self.cfg.resolved_loss, db, spec, cfg, tset, rc.K, rc.lam)
            outcomes = self._map(job, voices)
            self._write_adv(d, voices, outcomes)
            recs = self._records(voices, outcomes, spec.name, "robust")
            write_jsonl(d / "records.jsonl", recs)
            write_csv(d / "summary.csv", summarize(recs, self.cfg.name, db.speaker_ids),
                      SUMMARY_COLUMNS)
            return recs
        return self._stage("robust-attack", run)

    def _write_adv(self, d, voices, outcomes):
        for v, o in zip(voices, outcomes):
            store_wav(o.adversarial.clipped(), d / "wav" / f"{v.voice_id}.wav")

    def ota_eval(self, sources=("attack", "robust")):
        """Transmit stored adversarial voices (and the benign ones) through the sweep.

        Rows cover {RIR pool} x {noise kind} x {SNR}; the RIR pool is held out
        (its seed differs from the training pool and ids are prefixed ``held``).
        """
        def run():
            d = self.out / "ota"
            d.mkdir(parents=True, exist_ok=True)
            db, spec = self.system(0), self.cfg.models[0]
            voices = self.voices(0)
            oc = self.cfg.ota
            _, held = make_rir_pool(oc.num_rirs, _child_seed(self.cfg.master_seed, 37), "held",
                                    self.cfg.corpus.sample_rate)
            sets = {"benign": [v.wave for v in voices]}
            for src in sources:
                wd = self.out / src / "wav"
                if wd.is_dir():
                    sets[src] = [load_wav(wd / f"{v.voice_id}.wav") for v in voices]
            recs, rows = [], []
            for name, waves in sets.items():
                for kind in oc.noise_kinds:
                    for snr in oc.snr_db:
                        items = []
                        for k, (v, w) in enumerate(zip(voices, waves)):
                            for r in range(oc.repeats):
                                rng = np.random.default_rng([v.seed, r])
                                rir = held[int(rng.integers(len(held)))]
                                y = transmit(w, rir, (NoiseKind(kind), float(snr)), rng)
                                dec = decide(score(y, db, spec), db)
                                items.append((v.setting, dec))
                                recs.append({"source": name, "voice": v.voice_id, "repeat": r,
                                             "rir": rir.rir_id, "noise": kind,
                                             "snr_db": float(snr), "decision": dec})
                        asr = compute_asr(items, db.speaker_ids)
                        rows.append({"experiment": self.cfg.name, "voices": name,
                                     "rir_pool": "held", "noise": kind, "snr_db": float(snr),
                                     "n": asr["n"], "ASR_t": asr["ASR_t"],
                                     "ASR_u": asr["ASR_u"]})
            write_jsonl(d / "records.jsonl", recs)
            write_csv(d / "summary.csv", rows,
                      ["experiment", "voices", "rir_pool", "noise", "snr_db", "n", "ASR_t",
                       "ASR_u"])
            return rows
        return self._stage("ota-eval", run)

    def transfer(self):
        def run():
            d = self.out / "transfer"
            d.mkdir(parents=True, exist_ok=True)
            res = transfer_matrix(self.cfg.models, self.split, self.cfg.setting,
                                  self.cfg.attack, self.cfg.resolved_loss,
                                  self.cfg.target_policy, self.cfg.master_seed,
                                  self.cfg.max_voices)
            names = res["models"]
            rows = [{"source": names[i], "target": names[j],
                     "effect": float(res["matrix"][i, j])}
                    for i in range(len(names)) for j in range(len(names))]
            write_csv(d / "matrix.csv", rows, ["source", "target", "effect"])
            write_csv(d / "gradient_size.csv", res["gradient_size"],
                      ["model", "gradient_l1", "transfer_bound"])
            asym = [{"model_i": names[i], "model_j": names[j], "difference": v}
                    for i, j, v in res["asymmetry"]]
            write_csv(d / "asymmetry.csv", asym, ["model_i", "model_j", "difference"])
            return res
        return self._stage("transfer-matrix", run)

    def report(self):
        """Rebuild summaries from the per-voice records already on disk."""
        def run():
            rows = []
            ids = self.system(0).speaker_ids
            for sub in ("attack", "robust"):
                path = self.out / sub / "records.jsonl"
                if path.is_file():
                    rows.extend(summarize(read_jsonl(path), self.cfg.name, ids))
            write_csv(self.out / "report.csv", rows, SUMMARY_COLUMNS)
            return rows
        return self._stage("report", run)

    def write_config(self):
        self.out.mkdir(parents=True, exist_ok=True)
        (self.out / "config.json").write_text(
            json.dumps(self.cfg.to_dict(), indent=1, sort_keys=True) + "\n")


@dataclass
class _AttackJob:
    loss: str
    db: SpeakerDatabase
    spec: EmbedderSpec
    cfg: AttackConfig

    def __call__(self, voice):
        return run_attack(voice, self.loss, self.db, self.spec, self.cfg)


@dataclass
class _RobustJob:
    loss: str
    db: SpeakerDatabase
    spec: EmbedderSpec
    cfg: AttackConfig
    tset: TransformSet
    K: int
    lam: float

    def __call__(self, voice):
        cfg = replace(self.cfg, seed=voice.seed)
        return robust_attack(voice.wave, self.loss, voice.setting, self.db, self.spec, cfg,
                             self.tset, self.K, self.lam)


def run_experiment(cfg: ExperimentConfig, robust: bool = True, ota: bool = True,
                   transfer: bool = False) -> Experiment:
    """Full pipeline: corpus, enrollment, thresholds, attacks, optional robust/OTA/transfer."""
    exp = Experiment(cfg)
    exp.write_config()
    exp.gen_corpus()
    exp.enroll()
    exp.tune_threshold()
    exp.attack()
    if robust:
        exp.robust_attack()
    if ota:
        exp.ota_eval()
    if transfer and len(cfg.models) > 1:
        exp.transfer()
    exp.report()
    return exp
