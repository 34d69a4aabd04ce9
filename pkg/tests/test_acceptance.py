"""Acceptance suite: one test per criterion, each printing a pass/fail line.

Criterion 8 (reproducing the published TUT benchmark ordering) requires the
real TUT datasets and is skipped here; see the README for how to run that
study when the audio is available.
"""

import json
import time
from pathlib import Path

import numpy as np
import pytest

from sedmtl import autodiff as ad
from sedmtl import cli, evaluation as ev, losses, training
from sedmtl.fixture import generate_fixture
from sedmtl.losses import SceneTarget


def _report(criterion: str, ok: bool, detail: str):
    print(f"[acceptance {criterion}] {'PASS' if ok else 'FAIL'}: {detail}")
    assert ok, f"{criterion}: {detail}"


def _random_gru_cell(rng, n_in, units):
    def w(shape):
        return ad.tensor(rng.uniform(-0.5, 0.5, size=shape))

    return ad.GRUCell(
        w_update=w((n_in, units)), w_reset=w((n_in, units)), w_cand=w((n_in, units)),
        u_update=w((units, units)), u_reset=w((units, units)), u_cand=w((units, units)),
        b_update=w(units), b_reset=w(units), b_cand=w(units),
    )


class TestCriterion1GradientSuite:
    """Every primitive and every loss against central finite differences,
    100 random trials each, rel err < 1e-4 recurrent / 1e-6 otherwise."""

    def test_gradient_suite(self):
        start = time.monotonic()
        worst = {}

        def run(name, tol, make_case):
            errs = []
            for trial in range(100):
                rng = np.random.default_rng(hash(name) % 100000 + trial)
                fn, inputs = make_case(rng)
                report = ad.grad_check(fn, inputs, seed=trial)
                errs.append(report.max_rel_err)
            worst[name] = (max(errs), tol)

        def conv_case(rng):
            x = ad.tensor(rng.normal(size=(2, 4, 5)))
            k = ad.tensor(rng.normal(size=(3, 2, 3, 3)))
            b = ad.tensor(rng.normal(size=3))
            return ad.conv2d, [x, k, b]

        def pool_case(rng):
            vals = rng.permutation(np.linspace(-1.0, 1.0, 2 * 5 * 6)).reshape(2, 5, 6)
            ph, pw = int(rng.integers(1, 4)), int(rng.integers(1, 4))
            return (lambda t: ad.maxpool2d(t, ph, pw)), [ad.tensor(vals)]

        def bigru_case(rng):
            fwd = _random_gru_cell(rng, 2, 2)
            bwd = _random_gru_cell(rng, 2, 2)
            x = ad.tensor(rng.normal(size=(3, 2)))
            inputs = [x] + fwd.tensors() + bwd.tensors()
            return (lambda xt, *rest: ad.bigru_forward(xt, fwd, bwd)), inputs

        def dense_case(rng):
            x = ad.tensor(rng.normal(size=(3, 4)))
            w = ad.tensor(rng.normal(size=(4, 2)))
            b = ad.tensor(rng.normal(size=2))
            return ad.dense, [x, w, b]

        def sigmoid_case(rng):
            return ad.sigmoid, [ad.tensor(rng.normal(scale=2.0, size=6))]

        def softmax_case(rng):
            temperature = float(rng.choice([0.5, 1.0, 2.0]))
            return (
                lambda t: ad.softmax_temperature(t, temperature),
                [ad.tensor(rng.normal(scale=2.0, size=5))],
            )

        def event_loss_case(rng):
            roll = (rng.random((3, 4)) < 0.5).astype(float)
            mask = np.ones(4)
            mask[int(rng.integers(0, 4))] = 0.0
            return (
                lambda t: losses.event_loss(t, roll, mask),
                [ad.tensor(rng.normal(size=(3, 4)))],
            )

        def hard_loss_case(rng):
            target = SceneTarget.one_hot(int(rng.integers(0, 4)), 4)
            return (
                lambda t: losses.scene_hard_loss(t, target),
                [ad.tensor(rng.normal(scale=2.0, size=4))],
            )

        def soft_loss_case(rng):
            p = rng.random(4) + 0.05
            p = p / p.sum()
            temperature = float(rng.choice([0.5, 1.0, 2.0]))
            return (
                lambda t: losses.soft_scene_loss(t, p, temperature),
                [ad.tensor(rng.normal(scale=2.0, size=4))],
            )

        run("conv2d", 1e-6, conv_case)
        run("maxpool2d", 1e-6, pool_case)
        run("bigru", 1e-4, bigru_case)
        run("dense", 1e-6, dense_case)
        run("sigmoid", 1e-6, sigmoid_case)
        run("softmax_temperature", 1e-6, softmax_case)
        run("event_loss", 1e-6, event_loss_case)
        run("scene_hard_loss", 1e-6, hard_loss_case)
        run("soft_scene_loss", 1e-6, soft_loss_case)

        elapsed = time.monotonic() - start
        failures = {k: v for k, (v, tol) in worst.items() if v >= tol}
        detail = (
            ", ".join(f"{k}={v:.2e}" for k, (v, _) in sorted(worst.items()))
            + f"; runtime {elapsed:.1f}s"
        )
        _report("criterion 1 (gradient suite)", not failures and elapsed < 120.0, detail)


class TestCriterion2DistillationIdentities:
    def test_identities(self):
        rng = np.random.default_rng(42)
        max_gap = 0.0
        for _ in range(100):
            logits = rng.normal(scale=3.0, size=4)
            idx = int(rng.integers(0, 4))
            target = SceneTarget.one_hot(idx, 4)
            hard = losses.scene_hard_loss(ad.tensor(logits), target).values
            soft = losses.soft_scene_loss(ad.tensor(logits), target.probs, 1.0).values
            max_gap = max(max_gap, abs(float(hard) - float(soft)))
        e1 = ad.tensor(1.2345)
        exact_beta = losses.proposed_objective(e1, ad.tensor(9.9), 0.0).values == e1.values
        exact_alpha = losses.mtl_objective(e1, ad.tensor(9.9), 0.0).values == e1.values
        _report(
            "criterion 2 (distillation identities)",
            max_gap <= 1e-12 and exact_beta and exact_alpha,
            f"one-hot soft vs hard max gap {max_gap:.2e}; "
            f"beta=0 exact {exact_beta}; alpha=0 exact {exact_alpha}",
        )


class TestCriterion3TemperatureBehavior:
    def test_entropy_and_limit(self):
        rng = np.random.default_rng(7)
        monotone = True
        for _ in range(100):
            logits = ad.tensor(rng.normal(scale=4.0, size=6))
            entropies = []
            for temperature in (0.5, 1.0, 2.0, 4.0, 8.0):
                p = ad.softmax_temperature(logits, temperature).values
                entropies.append(float(-(p * np.log(p + 1e-300)).sum()))
            monotone &= all(b >= a - 1e-12 for a, b in zip(entropies, entropies[1:]))
        p = ad.softmax_temperature(ad.tensor(rng.normal(scale=3.0, size=5)), 1000.0).values
        limit_gap = float(np.abs(p - 0.2).max())
        _report(
            "criterion 3 (temperature behavior)",
            monotone and limit_gap < 1e-3,
            f"entropy nondecreasing {monotone}; T=1000 uniform gap {limit_gap:.2e}",
        )


class TestCriterion4MetricsOracle:
    def test_brute_force_agreement(self):
        from test_evaluation import brute_force_recount

        rng = np.random.default_rng(11)
        agree = True
        for _ in range(200):
            m = int(rng.integers(1, 5))
            n = int(rng.integers(5, 220))
            ref = (rng.random((m, n)) < rng.uniform(0.05, 0.5)).astype(float)
            pred = (rng.random((m, n)) < rng.uniform(0.05, 0.5)).astype(float)
            counts = ev.segment_counts(ref, pred, hop_s=0.02, segment_s=1.0)
            oracle = brute_force_recount(ref, pred, 50)
            agree &= (
                (counts.tp, counts.fp, counts.fn) == (oracle["tp"], oracle["fp"], oracle["fn"])
                and counts.substitutions == oracle["s"]
                and counts.deletions == oracle["d"]
                and counts.insertions == oracle["i"]
                and counts.n_ref == oracle["n_ref"]
                and ev.f1_score(counts) == oracle["f1"]
                and ev.error_rate(counts) == oracle["er"]
            )
        ref = np.zeros((1, 150))
        pred = np.zeros((1, 150))
        ref[0, 0:100] = 1.0
        pred[0, 50:150] = 1.0
        counts = ev.segment_counts(ref, pred, hop_s=0.02)
        hand = ev.f1_score(counts) == 50.0 and ev.error_rate(counts) == 1.0
        _report(
            "criterion 4 (metrics oracle)",
            agree and hand,
            f"200 random recounts agree {agree}; hand case F1=50/ER=1.0 {hand}",
        )


@pytest.fixture(scope="module")
def pipeline_workspace(tmp_path_factory):
    """Fixture dataset ingested with features, shared by criteria 5-7."""
    root = tmp_path_factory.mktemp("acceptance")
    info = generate_fixture(root / "data", clip_seconds=1.0)
    out = root / "ingested"
    feats = root / "features"
    assert cli.main([
        "ingest",
        "--metadata", str(info.metadata_path),
        "--annotations", str(info.annotations_dir),
        "--out", str(out), "--folds", "2", "--seed", "0",
    ]) == 0
    assert cli.main(["features", "--manifest", str(out / "manifest.json"), "--out", str(feats)]) == 0
    return {
        "root": root,
        "manifest": out / "manifest.json",
        "vocabulary": out / "vocabulary.json",
        "features": feats,
    }


def _train_config(ws, out_dir, mode, **train):
    doc = {
        "train": {"mode": mode, **train},
        "paths": {
            "manifest": str(ws["manifest"]),
            "vocabulary": str(ws["vocabulary"]),
            "features_dir": str(ws["features"]),
            "out_dir": str(out_dir),
        },
    }
    path = Path(out_dir).parent / f"{Path(out_dir).name}_config.json"
    path.parent.mkdir(parents=True, exist_ok=True)
    path.write_text(json.dumps(doc, indent=2))
    return path, doc


class TestCriterion5EndToEndOverfit:
    def test_full_pipeline_overfits_fixture(self, pipeline_workspace):
        ws = pipeline_workspace
        start = time.monotonic()
        base = ws["root"] / "overfit"

        teacher_cfg, _ = _train_config(
            ws, base / "teacher", "teacher",
            learning_rate=1e-3, batch_size=8, max_epochs=200, patience=15,
            seed=0, fold=-1,
        )
        assert cli.main(["train", "--config", str(teacher_cfg)]) == 0
        teacher_log = [
            json.loads(line)
            for line in (base / "teacher" / "teacher_log.jsonl").read_text().splitlines()
        ]
        teacher_acc = max(r["val_metrics"]["scene_accuracy"] for r in teacher_log)

        soft_path = base / "soft_labels.json"
        assert cli.main([
            "distill",
            "--checkpoint", str(base / "teacher" / "teacher.ckpt"),
            "--manifest", str(ws["manifest"]),
            "--vocabulary", str(ws["vocabulary"]),
            "--features", str(ws["features"]),
            "--temperature", "1.0",
            "--out", str(soft_path),
        ]) == 0

        student_cfg, _ = _train_config(
            ws, base / "student", "mtl_soft",
            beta=1.0, temperature=1.0, learning_rate=1e-3, batch_size=8,
            max_epochs=120, patience=120, seed=0, fold=-1, chunk_len=50,
        )
        with open(student_cfg, encoding="utf-8") as fh:
            doc = json.load(fh)
        doc["paths"]["soft_labels"] = str(soft_path)
        student_cfg.write_text(json.dumps(doc, indent=2))
        assert cli.main(["train", "--config", str(student_cfg)]) == 0
        student_log = [
            json.loads(line)
            for line in (base / "student" / "mtl_soft_log.jsonl").read_text().splitlines()
        ]
        best_e1 = min(r["train_losses"]["event_per_unit"] for r in student_log)
        epochs_to_target = next(
            (r["epoch"] for r in student_log if r["train_losses"]["event_per_unit"] < 0.05),
            None,
        )

        report_dir = base / "report"
        assert cli.main([
            "eval",
            "--checkpoint", str(base / "student" / "mtl_soft.ckpt"),
            "--manifest", str(ws["manifest"]),
            "--vocabulary", str(ws["vocabulary"]),
            "--features", str(ws["features"]),
            "--fold", "-1",
            "--policy", "calibrated",
            "--out", str(report_dir),
        ]) == 0
        report = json.loads((report_dir / "report.json").read_text())
        f1 = report["overall"]["f1"]

        # loss decreases over training for the student as well
        decreasing = (
            student_log[-1]["train_losses"]["total"]
            < student_log[0]["train_losses"]["total"]
        )
        elapsed = time.monotonic() - start
        ok = (
            teacher_acc == 1.0
            and f1 >= 95.0
            and best_e1 < 0.05
            and epochs_to_target is not None
            and epochs_to_target <= 500
            and decreasing
            and elapsed < 300.0
        )
        _report(
            "criterion 5 (end-to-end overfit)",
            ok,
            f"teacher acc {teacher_acc:.2f}; train F1 {f1:.2f}%; "
            f"E1/unit {best_e1:.4f} (target <0.05 reached at epoch {epochs_to_target}); "
            f"loss decreasing {decreasing}; wall {elapsed:.0f}s",
        )


class TestCriterion6ReductionEquivalence:
    def test_one_hot_teacher_trace_matches_hard(self, pipeline_workspace):
        ws = pipeline_workspace
        from sedmtl.data import Vocabulary

        vocabulary = Vocabulary.load(ws["vocabulary"])
        entries, examples = cli._load_examples(ws["manifest"], vocabulary, ws["features"])
        ids = sorted(examples)
        split = training.standardize_split(examples, ids)
        clips = [split[c] for c in ids]
        one_hot = {}
        for clip in clips:
            p = np.zeros(vocabulary.n_scenes)
            p[clip.scene] = 1.0
            one_hot[clip.clip_id] = p
        weight = 0.7
        common = dict(
            learning_rate=1e-3, batch_size=8, max_epochs=10, patience=10,
            seed=3, chunk_len=50,
        )
        hard = training.train_student(
            clips, clips,
            training.TrainConfig(mode="mtl_hard", alpha=weight, **common),
        )
        soft = training.train_student(
            clips, clips,
            training.TrainConfig(mode="mtl_soft", beta=weight, temperature=1.0, **common),
            soft_labels=one_hot,
        )
        gaps = [
            abs(a["train_losses"][key] - b["train_losses"][key])
            for a, b in zip(hard.log, soft.log)
            for key in ("event", "scene_term", "total")
        ]
        max_gap = max(gaps)
        ok = len(hard.log) == len(soft.log) == 10 and max_gap < 1e-9
        _report(
            "criterion 6 (reduction equivalence)",
            ok,
            f"10-epoch trace max gap {max_gap:.2e}",
        )


class TestCriterion7Reproducibility:
    def test_bit_identical_outputs(self, pipeline_workspace):
        ws = pipeline_workspace
        base = ws["root"] / "repro"
        pairs = []
        for tag in ("run1", "run2"):
            out_dir = base / tag
            cfg, _ = _train_config(
                ws, out_dir, "mtl_hard",
                alpha=0.0001, learning_rate=1e-3, batch_size=8,
                max_epochs=2, patience=5, seed=1, fold=0, chunk_len=50,
            )
            assert cli.main(["train", "--config", str(cfg)]) == 0
            report_dir = base / f"{tag}_report"
            assert cli.main([
                "eval",
                "--checkpoint", str(out_dir / "mtl_hard.ckpt"),
                "--manifest", str(ws["manifest"]),
                "--vocabulary", str(ws["vocabulary"]),
                "--features", str(ws["features"]),
                "--fold", "0",
                "--policy", "calibrated",
                "--out", str(report_dir),
            ]) == 0
            pairs.append(
                (
                    (out_dir / "mtl_hard.ckpt").read_bytes(),
                    (out_dir / "mtl_hard_log.jsonl").read_bytes(),
                    (report_dir / "report.json").read_bytes(),
                    (report_dir / "report.txt").read_bytes(),
                )
            )
        same = [a == b for a, b in zip(pairs[0], pairs[1])]
        _report(
            "criterion 7 (reproducibility)",
            all(same),
            f"checkpoint/log/report.json/report.txt identical: {same}",
        )


class TestCriterion8FullDataStudy:
    def test_tut_benchmark_ordering(self):
        print(
            "[acceptance criterion 8] SKIP: needs the TUT 2016/2017 audio "
            "(192 minutes); run `sedmtl cv` on the real datasets, expecting "
            "mtl_soft F1 > mtl_hard(alpha=0.0001) F1 > event_only F1 and "
            "mtl_soft F1 within 5 points of 49.82%"
        )
        pytest.skip("optional full-data study; TUT datasets not bundled")
