import numpy as np
import pytest

from mafbench import protocols as pr
from mafbench.algorithms import hparams as hp
from mafbench.algorithms.training import Checkpoint, RunRecord
from mafbench.audit import AccessAudit, AuditViolation, Read, check_read


class TestAudit:
    def test_heldout_test_before_final_rejected(self):
        audit = AccessAudit(held_out=0)
        with pytest.raises(AuditViolation):
            audit.record(0, "test", "final_test", "oracle")

    def test_final_read_allowed(self):
        audit = AccessAudit(held_out=0)
        audit.enter_final()
        audit.record(0, "test", "final_test", "tm")
        assert audit.violations() == []

    @pytest.mark.parametrize("protocol", ["tm", "loo"])
    def test_heldout_val_forbidden_under_tm_loo(self, protocol):
        with pytest.raises(AuditViolation):
            AccessAudit(0).record(0, "val", "oracle_val", protocol)

    def test_oracle_val_allowed_only_on_heldout(self):
        AccessAudit(0).record(0, "val", "oracle_val", "oracle")
        with pytest.raises(AuditViolation):
            AccessAudit(0).record(1, "val", "oracle_val", "oracle")

    def test_heldout_train_forbidden(self):
        with pytest.raises(AuditViolation):
            AccessAudit(2).record(2, "train", "train", "oracle")

    def test_perceptor_fit_exempt(self):
        assert check_read(Read(0, "train", "perceptor_fit", "tm", "train"), 0) == ""

    def test_unknown_purpose(self):
        with pytest.raises(ValueError):
            AccessAudit(0).record(1, "train", "peek")


def fake_run(algo, trial, seed, test, protocol="oracle", tm=0.6, oracle=0.6, test_auc=0.6, fold=None, loo=None):
    cp = Checkpoint(100, tm, loo, oracle if protocol == "oracle" else None)
    return RunRecord(f"weak-{algo}-{protocol}-t{trial}-s{seed}-m{test}" + ("" if fold is None else f"-f{fold}"),
                     "weak", algo, hp.family(algo), protocol, seed, trial, test, {}, [cp],
                     None if fold is not None else test_auc, fold=fold, eval_step=100)


class TestSelection:
    def test_oracle_picks_best_val(self):
        runs = [fake_run("erm", 0, 0, 0, oracle=0.6, test_auc=0.5), fake_run("erm", 1, 0, 0, oracle=0.7, test_auc=0.9)]
        (sel,) = pr.select_model(runs, "oracle")
        assert (sel.trial, sel.test_auc) == (1, 0.9)
        assert runs[1].selected and not runs[0].selected

    def test_tie_goes_to_lowest_trial(self):
        runs = [fake_run("erm", 2, 0, 0, oracle=0.7), fake_run("erm", 1, 0, 0, oracle=0.7)]
        assert pr.select_model(runs, "oracle")[0].trial == 1

    def test_tm_uses_training_val(self):
        runs = [fake_run("erm", 0, 0, 0, "tm", tm=0.9, test_auc=0.4), fake_run("erm", 1, 0, 0, "tm", tm=0.5)]
        assert pr.select_model(runs, "tm")[0].test_auc == 0.4

    def test_loo_scores_fold_means(self):
        runs = [fake_run("erm", 0, 0, 0, "loo", test_auc=0.3), fake_run("erm", 1, 0, 0, "loo", test_auc=0.8)]
        runs += [fake_run("erm", 0, 0, 0, "loo", fold=f, loo=0.9) for f in (1, 2)]
        runs += [fake_run("erm", 1, 0, 0, "loo", fold=f, loo=v) for f, v in ((1, 0.95), (2, 0.7))]
        # trial 0 folds average 0.9, trial 1 average 0.825
        assert pr.select_model(runs, "loo")[0].test_auc == 0.3

    def test_one_per_seed(self):
        runs = [fake_run("erm", t, s, 0) for t in range(3) for s in range(4)]
        assert [s.seed for s in pr.select_model(runs, "oracle")] == [0, 1, 2, 3]

    def test_failed_runs_never_selected(self):
        bad = fake_run("erm", 0, 0, 0, oracle=0.99)
        bad.status = "failed"
        assert pr.select_model([bad, fake_run("erm", 1, 0, 0, oracle=0.5)], "oracle")[0].trial == 1

    def test_reselection_clears_stale_flags(self):
        runs = [fake_run("erm", 0, 0, 0, oracle=0.6), fake_run("erm", 1, 0, 0, oracle=0.7)]
        pr.select_model(runs[:1], "oracle")
        pr.select_model(runs, "oracle")
        assert [r.selected for r in runs] == [False, True]

    def test_unknown_protocol(self):
        with pytest.raises(hp.ConfigError, match="tm, loo, oracle"):
            pr.select_model([fake_run("erm", 0, 0, 0)], "foo")

    def test_mixed_groups_rejected(self):
        with pytest.raises(ValueError):
            pr.select_model([fake_run("erm", 0, 0, 0), fake_run("irm", 0, 0, 0)], "oracle")


class TestAggregate:
    def sels(self):
        runs = [fake_run(a, 0, s, m, test_auc=0.5 + 0.1 * s + 0.01 * m)
                for a in ("erm", "concat") for s in range(2) for m in range(3)]
        return pr.select_all(runs)

    def test_mean_and_population_std(self):
        rep = pr.aggregate_report(self.sels())
        row = rep.cell("erm", "oracle", "0")
        assert (row.mean_auc, row.std_auc, row.n_runs) == (pytest.approx(0.55), pytest.approx(0.05), 2)
        mean_row = rep.cell("erm", "oracle", "mean")
        assert mean_row.mean_auc == pytest.approx(0.56)

    def test_family_rows(self):
        rep = pr.aggregate_report(self.sels())
        assert rep.cell("DG_mean", "oracle").mean_auc == pytest.approx(rep.cell("erm", "oracle").mean_auc)
        assert rep.family_means[("weak", "oracle", "mean")]["MML"] == pytest.approx(0.56)

    def test_permutation_invariant(self, rng):
        sels = self.sels()
        shuffled = [sels[i] for i in rng.permutation(len(sels))]
        assert pr.aggregate_report(sels).to_csv() == pr.aggregate_report(shuffled).to_csv()

    def test_csv_layout(self):
        lines = pr.aggregate_report(self.sels()).to_csv().splitlines()
        assert lines[0] == pr.REPORT_HEADER
        assert lines[1:] == sorted(lines[1:], key=lambda l: l.split(",")[:4])

    def test_empty(self):
        assert pr.aggregate_report([]).to_csv() == pr.REPORT_HEADER + "\n"


class TestSweep:
    def test_plan_includes_loo_folds(self):
        sweep = pr.SweepConfig(("erm",), trials=2, seeds=1, protocols=("loo",))
        jobs = pr.plan_jobs(3, sweep)
        assert len(jobs) == 3 * 2 * 3
        assert sum(j.fold is not None for j in jobs) == 12

    def test_invalid_protocol_named(self):
        with pytest.raises(hp.ConfigError, match="valid protocols"):
            pr.SweepConfig(("erm",), protocols=("foo",))

    def test_seed_keys_distinct(self):
        jobs = pr.plan_jobs(3, pr.SweepConfig(("erm", "irm"), trials=2, seeds=2, protocols=("loo",)))
        keys = {tuple(j.seed_key(0)) for j in jobs}
        assert len(keys) == len(jobs)
        assert all(min(k) >= 0 for k in keys)

    def test_small_sweep_end_to_end(self, small_world):
        sweep = pr.SweepConfig(("erm", "concat"), trials=2, seeds=1, protocols=("tm", "loo", "oracle"), steps=100)
        recs = pr.run_benchmark(small_world, sweep)
        assert [r.run_id for r in recs] == sorted(r.run_id for r in recs)
        summary = pr.audit_summary(recs)
        assert summary["violations"] == []
        assert summary["heldout_test_reads_before_final"] == 0
        assert summary["heldout_reads_during_tm_loo_selection"] == 0
        assert all(r.final_test_auc is None for r in recs if r.fold is not None)
        report = pr.aggregate_report(pr.select_all(recs))
        assert {r.protocol for r in report.rows} == {"tm", "loo", "oracle"}

    def test_thread_count_does_not_matter(self, small_world):
        out = []
        for threads in (1, 2):
            sweep = pr.SweepConfig(("irm",), trials=2, seeds=1, steps=100, threads=threads)
            out.append("".join(r.to_json() for r in pr.run_benchmark(small_world, sweep)))
        assert out[0] == out[1]


class TestAblation:
    def test_modes(self, small_world):
        res = pr.run_ablation(small_world, "single_modality", seeds=1, steps=100)
        assert len(res.per_run) == 3 and 0.0 <= res.mean <= 1.0

    def test_bad_mode(self, small_world):
        with pytest.raises(hp.ConfigError):
            pr.run_ablation(small_world, "everything")
