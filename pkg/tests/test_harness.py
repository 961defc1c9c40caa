import json
import math

import numpy as np
import pytest

from srattack import harness
from srattack.attack import AttackConfig
from srattack.harness import (BEST_LOSS, ExperimentConfig, attack_voices, benign_trials,
                              build_system, compute_asr, compute_rates, input_gradient_size,
                              read_jsonl, run_attack, run_experiment, select_target, spearman,
                              stealth_metrics, summarize, transfer_matrix, write_csv,
                              write_jsonl)
from srattack.losses import AttackSetting, check_applicable
from srattack.srs import IMPOSTER, EmbedderSpec

IDS = ("a", "b", "c")


def asr_of(split, db, spec, setting_id, policy, eps, loss):
    voices = attack_voices(split, db, spec, setting_id, policy, 0)
    outs = [run_attack(v, loss, db, spec, AttackConfig(epsilon=eps, iters=5)) for v in voices]
    return compute_asr([(v.setting, o) for v, o in zip(voices, outs)], db.speaker_ids), outs


class TestRates:
    def test_all_imposters_accepted(self):
        r = compute_rates([(IMPOSTER, "a"), (IMPOSTER, "b")])
        assert r["FAR"] == 100.0 and r["FRR"] is None

    def test_misid_is_not_rejection(self):
        r = compute_rates([("a", "b"), ("a", "a"), ("b", IMPOSTER), ("b", "b")])
        assert r["IER"] == 25.0 and r["FRR"] == 25.0 and r["Acc"] == 50.0

    def test_counts_sum(self):
        trials = [("a", "a"), (IMPOSTER, IMPOSTER), ("b", "a"), (IMPOSTER, "c")]
        r = compute_rates(trials)
        assert r["n_enrolled"] + r["n_unenrolled"] == len(trials)

    def test_empty(self):
        with pytest.raises(ValueError):
            compute_rates([])

    def test_separated_toy_system(self, split, spec, osi_db):
        r = compute_rates(benign_trials(split, osi_db, spec))
        assert r["FAR"] == r["FRR"] == r["IER"] == 0.0

    def test_csi_excludes_unenrolled(self, split, spec):
        db = build_system(split, spec, "CSI")
        r = compute_rates(benign_trials(split, db, spec))
        assert r["n_unenrolled"] == 0 and r["FAR"] is None


class TestAsr:
    def test_all_hit_target(self):
        items = [(AttackSetting("C6", source=0, target=2), "c")] * 4
        r = compute_asr(items, IDS)
        assert r["ASR_t"] == 100.0 and r["ASR_u"] >= r["ASR_t"]

    def test_no_change(self):
        items = [(AttackSetting("C8", source=i), IDS[i]) for i in range(3)]
        r = compute_asr(items, IDS)
        assert r["ASR_u"] == 0.0 and r["ASR_t"] is None

    def test_c4_subrates(self):
        s = AttackSetting("C4", source=0)
        r = compute_asr([(s, IMPOSTER), (s, "b"), (s, "a"), (s, "c")], IDS)
        assert (r["ASR_u"], r["ASR_u_reject"], r["ASR_u_misid"]) == (75.0, 25.0, 50.0)

    def test_unenrolled_source(self):
        s = AttackSetting("C5")
        assert compute_asr([(s, IMPOSTER), (s, "b")], IDS)["ASR_u"] == 50.0

    def test_mixed_settings(self):
        with pytest.raises(ValueError):
            compute_asr([(AttackSetting("C5"), "a"), (AttackSetting("C8", source=0), "b")], IDS)

    def test_record_dicts(self):
        s = AttackSetting("C8", source=1)
        assert compute_asr([(s, {"decision": "a"})], IDS)["ASR_u"] == 100.0

    def test_targeted_implies_untargeted(self, split, spec, csi_db):
        r, _ = asr_of(split, build_system(split, spec, "CSI"), spec, "C6", "random", 0.001, "M")
        assert r["ASR_u"] >= r["ASR_t"]


class TestStealth:
    def test_zero_perturbation(self):
        m = stealth_metrics([0.1, 0.2], [0.1, 0.2])
        assert m["L2"] == 0 and m["Linf"] == 0 and m["SNR_db"] == math.inf

    def test_doubling(self):
        m = stealth_metrics([0.1, -0.2], [0.2, -0.4])
        assert m["SNR_db"] == pytest.approx(0.0)

    def test_length_mismatch(self):
        with pytest.raises(ValueError):
            stealth_metrics([0.1], [0.1, 0.2])


class TestTargets:
    def test_least_likely(self):
        assert select_target("least-likely", 0, [0.9, 0.2, 0.5]) == 1

    def test_random_singleton(self):
        assert all(select_target("random", 0, [0.1, 0.2], s) == 1 for s in range(10))

    def test_random_seeded(self):
        assert select_target("random", None, np.zeros(8), 3) == \
            select_target("random", None, np.zeros(8), 3)

    def test_fixed(self):
        assert select_target("fixed:2", 0, [0.1, 0.2, 0.3]) == 2
        with pytest.raises(ValueError):
            select_target("fixed:0", 0, [0.1, 0.2])
        with pytest.raises(ValueError):
            select_target("fixed:9", 0, [0.1, 0.2])

    def test_unknown_policy(self):
        with pytest.raises(ValueError):
            select_target("worst", 0, [0.1, 0.2])

    def test_least_likely_is_harder(self, split, spec):
        db = build_system(split, spec, "CSI")
        r_rand, _ = asr_of(split, db, spec, "C6", "random", 0.0005, "M")
        r_ll, _ = asr_of(split, db, spec, "C6", "least-likely", 0.0005, "M")
        assert r_ll["ASR_t"] <= r_rand["ASR_t"]

    def test_unenrolled_source_is_easier(self, split, spec):
        db = build_system(split, spec, "CSI")
        r_in, _ = asr_of(split, db, spec, "C6", "random", 0.0005, "M")
        r_out, _ = asr_of(split, db, spec, "C7", "random", 0.0005, "M")
        assert r_out["ASR_t"] >= r_in["ASR_t"]


class TestVoices:
    def test_setting_task_mismatch(self, split, spec, osi_db):
        with pytest.raises(ValueError):
            attack_voices(split, osi_db, spec, "C8")

    def test_unenrolled_sources_are_imposters(self, split, spec, osi_db):
        voices = attack_voices(split, osi_db, spec, "C5")
        assert len(voices) == 10 and all(v.voice_id.startswith("imp") for v in voices)

    def test_max_voices_and_seeds(self, split, spec, osi_db):
        a = attack_voices(split, osi_db, spec, "C1", max_voices=4)
        b = attack_voices(split, osi_db, spec, "C1", max_voices=4)
        assert len(a) == 4 and [v.seed for v in a] == [v.seed for v in b]
        assert all(v.setting.target != v.setting.source for v in a)


class TestEpsilonSweep:
    def test_trend(self, split, spec):
        db = build_system(split, spec, "CSI")
        voices = attack_voices(split, db, spec, "C8")
        asr, snr = [], []
        for eps in (0.0002, 0.0005, 0.001, 0.002):
            outs = [run_attack(v, "Ms", db, spec, AttackConfig(epsilon=eps)) for v in voices]
            asr.append(compute_asr([(v.setting, o) for v, o in zip(voices, outs)],
                                   db.speaker_ids)["ASR_u"])
            snr.append(np.mean([stealth_metrics(v.wave, o.adversarial)["SNR_db"]
                                for v, o in zip(voices, outs)]))
        assert all(a <= b for a, b in zip(asr, asr[1:]))
        assert all(a > b for a, b in zip(snr, snr[1:]))


class TestTransfer:
    def test_identical_models_transfer_fully(self, split):
        models = [EmbedderSpec(), EmbedderSpec()]
        res = transfer_matrix(models, split, "C8", AttackConfig(epsilon=0.002), max_voices=6)
        m = res["matrix"]
        assert np.allclose(m, m[0, 0]) and res["n_voices"] == 6
        assert [g["model"] for g in res["gradient_size"]] == ["tanh-s0", "tanh-s0"]

    def test_needs_two_models(self, split):
        with pytest.raises(ValueError):
            transfer_matrix([EmbedderSpec()], split, "C8", AttackConfig())

    def test_gradient_size_homogeneous(self, split, spec):
        db = build_system(split, spec, "CSI")
        voices = attack_voices(split, db, spec, "C8", max_voices=3)
        a = input_gradient_size(spec, db, "Ms", voices)
        b = input_gradient_size(spec, db, "Ms", voices, scale=-3.0)
        assert b["gradient_l1"] == pytest.approx(3.0 * a["gradient_l1"])
        assert a["transfer_bound"] == pytest.approx(0.002 * a["gradient_l1"])

    def test_gradient_size_zero(self, split, spec, monkeypatch):
        db = build_system(split, spec, "CSI")
        voices = attack_voices(split, db, spec, "C8", max_voices=2)
        monkeypatch.setattr(harness, "input_loss_grad", lambda *a, **k: np.zeros(8000))
        assert input_gradient_size(spec, db, "Ms", voices)["gradient_l1"] == 0.0

    def test_spearman(self):
        assert spearman([1, 2, 3], [10, 20, 30]) == pytest.approx(1.0)
        assert spearman([1, 2, 3], [3, 2, 1]) == pytest.approx(-1.0)


class TestConfig:
    def test_roundtrip(self, tmp_path):
        cfg = ExperimentConfig(name="x", setting="C1", models=[EmbedderSpec(activation="softplus")],
                               target_policy="least-likely")
        p = tmp_path / "c.json"
        p.write_text(json.dumps(cfg.to_dict()))
        back = ExperimentConfig.load(p)
        assert back.to_dict() == cfg.to_dict() and back.resolved_loss == "L1"

    def test_unknown_key(self):
        with pytest.raises(ValueError):
            ExperimentConfig.from_dict({"nmae": "typo"})

    @pytest.mark.parametrize("kw", [dict(setting="C0"), dict(target_policy="worst"),
                                    dict(setting="C8", target_policy="least-likely"),
                                    dict(models=[]), dict(setting="C8", loss="CE")])
    def test_invalid(self, kw):
        with pytest.raises(ValueError):
            ExperimentConfig(**kw)

    @pytest.mark.parametrize("sid", list(BEST_LOSS))
    def test_best_loss_applicable(self, sid):
        check_applicable(BEST_LOSS[sid], sid)


class TestReports:
    def test_csv_format(self, tmp_path):
        write_csv(tmp_path / "a.csv", [{"x": 0.5, "y": None, "z": math.inf}], ["x", "y", "z"])
        assert (tmp_path / "a.csv").read_text() == "x,y,z\n0.500000,,inf\n"

    def test_jsonl_roundtrip(self, tmp_path):
        recs = [{"b": np.float64(1.5), "a": np.int64(2), "c": math.inf}]
        write_jsonl(tmp_path / "r.jsonl", recs)
        assert read_jsonl(tmp_path / "r.jsonl") == [{"a": 2, "b": 1.5, "c": "inf"}]

    def test_summary_recomputable(self):
        recs = [{"model": "m", "setting": "C8", "loss": "Ms", "optimizer": "PGD", "source": i,
                 "target": None, "decision": d, "l2": 0.1, "linf": 0.002, "snr_db": 30.0,
                 "queries": 0} for i, d in enumerate(["b", "b", "c"])]
        # only the first voice (source a) left its speaker
        row, = summarize(recs, "e", IDS)
        assert row["n"] == 3 and row["ASR_u"] == pytest.approx(100 / 3)
        assert row["mean_SNR_db"] == 30.0 and row["PESQ"] is None


class TestPipeline:
    def test_run_and_outputs(self, tmp_path):
        cfg = ExperimentConfig(output_dir=str(tmp_path / "o"), max_voices=3,
                               robust=harness.RobustConfig(iters=4, K=2, num_rirs=3),
                               ota=harness.OtaEvalConfig(num_rirs=2, snr_db=[10, 0], repeats=1,
                                                         noise_kinds=["white-gaussian",
                                                                      "uniform"]))
        exp = run_experiment(cfg)
        out = tmp_path / "o"
        for rel in ("config.json", "report.csv", "systems/thresholds.csv",
                    "attack/records.jsonl", "robust/summary.csv", "ota/summary.csv",
                    "corpus/manifest.jsonl"):
            assert (out / rel).is_file(), rel
        assert len(list((out / "attack" / "wav").glob("*.wav"))) == 3
        rows = (out / "ota" / "summary.csv").read_text().splitlines()[1:]
        # {benign, attack, robust} x {2 noise kinds} x {2 SNRs}
        assert len(rows) == 3 * 2 * 2
        recs = read_jsonl(out / "attack" / "records.jsonl")
        assert all(r["linf"] <= cfg.attack.epsilon + 1e-12 for r in recs)
        assert set(exp.timings) >= {"attack", "robust-attack", "ota-eval", "report"}

    def test_stage_error(self, tmp_path):
        cfg = ExperimentConfig(output_dir=str(tmp_path / "o"))
        exp = harness.Experiment(cfg)
        exp._split = harness.Split({}, {}, {})
        with pytest.raises(harness.StageError) as err:
            exp.enroll()
        assert err.value.stage == "enroll"

    def test_workers_do_not_change_results(self, tmp_path):
        base = dict(max_voices=2, attack=AttackConfig(iters=2))
        a = run_experiment(ExperimentConfig(output_dir=str(tmp_path / "a"), **base),
                           robust=False, ota=False)
        b = run_experiment(ExperimentConfig(output_dir=str(tmp_path / "b"), workers=2, **base),
                           robust=False, ota=False)
        ra = (tmp_path / "a" / "attack" / "records.jsonl").read_bytes()
        rb = (tmp_path / "b" / "attack" / "records.jsonl").read_bytes()
        assert ra == rb and a.cfg.workers != b.cfg.workers
