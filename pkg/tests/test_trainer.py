import builtins
import math
from collections import Counter
from pathlib import Path

import numpy as np
import pytest

from sspcm import trainer as tr
from sspcm.estimator import ArchConfig, AdamState, init_estimator
from sspcm.geometry import gaussian_targets
from sspcm.pcm import PLCache
from sspcm.trainer import (CSV_COLUMNS, Net, PseudoLabels, TeacherMutation, TrainConfig, Trainer,
                           format_metrics_row, occlude_batch, run_training, sample_affines,
                           split_labeled, teacher_pass, train_step1_supervised, train_step4_pcm,
                           train_step_cross)

TINY = dict(epochs=2, batch_size=8, snapshot_every=1)
IDENT = np.tile(np.eye(2, 3), (4, 1, 1))


def make_net(name, seed=0):
    p = init_estimator(ArchConfig(strides=(2, 2, 1, 1)), np.random.default_rng(seed))
    return Net(name, p, AdamState.zeros_like(p))


# --- config -------------------------------------------------------------------

def test_config_validation():
    with pytest.raises(ValueError):
        TrainConfig(method="ema")
    with pytest.raises(ValueError):
        TrainConfig(beta=-1)
    with pytest.raises(ValueError):
        TrainConfig(mask_steps="none")
    with pytest.raises(ValueError):
        TrainConfig(ssco_side=(0.5, 0.1))
    assert TrainConfig().replace(method="dual").nets == ("A", "B")
    assert TrainConfig(method="dual").reported_net == "A"
    assert TrainConfig().batch_size == 32 and TrainConfig().base_lr == 1e-3


def test_metrics_row_format():
    row = {"epoch": 3, "lr": 1e-4, "l_sup": 0.5, "l_unsup1": 0.0, "l_unsup2": 0.0, "l_unsup3": 0.0,
           "pck_a": float("nan"), "pck_b": float("nan"), "pck_c": 0.25}
    assert format_metrics_row(row) == "3,0.000100,0.500000,0.000000,0.000000,0.000000,nan,nan,0.250000\n"
    assert CSV_COLUMNS[0] == "epoch" and CSV_COLUMNS[-1] == "pck_c"


def test_split_labeled_disjoint(small_dataset):
    train, val = split_labeled(small_dataset.labeled, 0.2, 0)
    assert len(val) == 4 and len(train) == 16
    assert not set(train.ids) & set(val.ids)
    again, _ = split_labeled(small_dataset.labeled, 0.2, 0)
    assert np.array_equal(train.ids, again.ids)


def test_sample_affines_fix_center():
    m = sample_affines(np.random.default_rng(0), 50, 60, (0.75, 1.25), (64, 48))
    c = np.array([23.5, 31.5])
    np.testing.assert_allclose(m[:, :, :2] @ c + m[:, :, 2], np.tile(c, (50, 1)), atol=1e-9)
    ang = np.degrees(np.arctan2(m[:, 1, 0], m[:, 0, 0]))
    assert np.all(np.abs(ang) <= 60)


# --- steps --------------------------------------------------------------------

def test_step1_additivity_and_overfit(small_dataset):
    cfg = TrainConfig()
    x = small_dataset.labeled.images[:4]
    kps = small_dataset.labeled.keypoints[:4]
    nets = [make_net("A", 0), make_net("B", 1), make_net("C", 2)]
    nets[1].params.tensors = {k: np.zeros_like(v) for k, v in nets[1].params.tensors.items()}
    total, per = train_step1_supervised(nets, x, kps, IDENT, cfg, 1e-3)
    assert total == sum(per.values())
    # zeroed net predicts 0: its loss is the mean squared target
    target = gaussian_targets(kps * [0.25, 0.25, 1], 1.0, (16, 12))
    vis = kps[..., 2] > 0
    assert per["B"] == pytest.approx(float((target[vis] ** 2).mean()), rel=1e-6)
    losses = [train_step1_supervised(nets[:1], x, kps, IDENT, cfg, 3e-3)[0] for _ in range(20)]
    assert losses[-1] < losses[0]


def test_zero_teacher_masks_everything(small_dataset):
    cfg = TrainConfig()
    x = small_dataset.unlabeled.images[:4]
    pseudo = PseudoLabels(np.zeros((4, 11, 16, 12), np.float32), IDENT, np.zeros((4, 11)))
    student = make_net("B")
    before = student.params.checksum()
    loss = train_step_cross(pseudo, student, x, IDENT, cfg, 1e-3, np.random.default_rng(0))
    assert loss == 0.0 and student.params.checksum() == before
    assert student.opt.step == 0


def test_identity_transforms_target_is_teacher_output(small_dataset, monkeypatch):
    cfg = TrainConfig(ssco_patches=0)
    x = small_dataset.unlabeled.images[:4]
    teacher = make_net("A", 0)
    teacher.params.tensors["head.b"][:] = 0.3
    pseudo = teacher_pass(teacher, x, IDENT)
    seen = {}
    real = tr.mse_masked_loss

    def spy(pred, target, mask, tape=None):
        seen["target"] = target
        return real(pred, target, mask, tape)

    monkeypatch.setattr(tr, "mse_masked_loss", spy)
    train_step_cross(pseudo, make_net("B", 1), x, IDENT, cfg, 1e-3, np.random.default_rng(0))
    assert np.array_equal(seen["target"], tr.predict(teacher.params, x))


def test_occlusion_keeps_targets(small_dataset, monkeypatch):
    x = small_dataset.unlabeled.images[:4]
    teacher = make_net("A", 0)
    teacher.params.tensors["head.b"][:] = 0.3
    hard = sample_affines(np.random.default_rng(1), 4, 60, (0.75, 1.25), (64, 48))
    easy = sample_affines(np.random.default_rng(2), 4, 30, (0.75, 1.25), (64, 48))
    pseudo = teacher_pass(teacher, x, easy)
    seen = []
    real = tr.mse_masked_loss
    inputs = []
    real_fwd = tr.forward
    monkeypatch.setattr(tr, "mse_masked_loss", lambda p, t, m, tape=None: seen.append(t) or real(p, t, m, tape))
    monkeypatch.setattr(tr, "forward", lambda params, imgs, tape=True: inputs.append(imgs) or real_fwd(params, imgs, tape))
    for n in (0, 2):
        train_step_cross(pseudo, make_net("B", 1), x, hard, TrainConfig(ssco_patches=n), 1e-3,
                         np.random.default_rng(0))
    assert np.array_equal(seen[0], seen[1])
    assert not np.array_equal(inputs[0], inputs[1])  # the occlusion did change the input


def test_oracle_teacher_student_improves(small_dataset):
    cfg = TrainConfig(ssco_patches=0)
    x = small_dataset.labeled.images[:8]
    kps = small_dataset.labeled.keypoints[:8].copy()
    hm = gaussian_targets(kps * [0.25, 0.25, 1], 1.0, (16, 12))
    ident = np.tile(np.eye(2, 3), (8, 1, 1))
    pseudo = PseudoLabels(hm, ident, kps[..., 2])
    student = make_net("B", 1)
    losses = [train_step_cross(pseudo, student, x, ident, cfg, 3e-3, np.random.default_rng(i)) for i in range(20)]
    assert np.mean(losses[-5:]) < 0.9 * np.mean(losses[:5])


def test_teacher_mutation_detected(small_dataset, monkeypatch):
    teacher = make_net("A")

    def corrupt(params, images, batch=128):
        params.tensors["head.b"] += 1
        return np.zeros((len(images), 11, 16, 12), np.float32)

    monkeypatch.setattr(tr, "predict", corrupt)
    with pytest.raises(TeacherMutation):
        teacher_pass(teacher, small_dataset.unlabeled.images[:2], IDENT[:2])


def test_step4_duplicate_teachers(small_dataset):
    cfg = TrainConfig()
    x = small_dataset.unlabeled.images[:4]
    ids = small_dataset.unlabeled.ids[:4]
    net = make_net("A", 0)
    net.params.tensors["head.b"][:] = 0.2
    rng = np.random.default_rng(5)
    net.params.tensors["head.w"] += rng.normal(0, 0.05, net.params.tensors["head.w"].shape).astype(np.float32)
    pseudo = teacher_pass(net, x, IDENT)
    canon = pseudo.canonical_heatmaps()
    cache = PLCache(small_dataset.unlabeled.ids, (11, 16, 12))
    hard = sample_affines(np.random.default_rng(3), 4, 60, (0.75, 1.25), (64, 48))
    student = make_net("C", 2)
    counters = Counter()
    _, info = train_step4_pcm(student, canon, canon.copy(), cache, ids, x, hard, cfg, 1e-3,
                              np.random.default_rng(0), counters)
    kept = info["mask"] > 0
    assert kept.any() and np.all(info["pi"][kept] == 0)
    assert counters["pcm_correct"] == 1 and counters["forward_C"] == 1
    # current labels are staged for the next epoch only
    assert cache.get(ids[0], "A") is None
    cache.promote()
    assert np.array_equal(cache.get(ids[0], "B"), canon[0])


def test_step4_all_below_tau(small_dataset):
    cfg = TrainConfig()
    x = small_dataset.unlabeled.images[:4]
    weak = np.full((4, 11, 16, 12), 0.01, np.float32)
    student = make_net("C", 2)
    before = student.params.checksum()
    loss, info = train_step4_pcm(student, weak, weak, None, small_dataset.unlabeled.ids[:4], x, IDENT,
                                 cfg, 1e-3, np.random.default_rng(0))
    assert loss == 0.0 and not info["mask"].any()
    assert student.params.checksum() == before


def test_occlude_batch_cyclic_donor():
    imgs = np.stack([np.full((64, 48), v) for v in (0.0, 0.5, 1.0)])
    kps = np.zeros((3, 11, 3))
    kps[:, 0] = [20, 30, 1.0]
    out = occlude_batch(imgs, kps, TrainConfig().ssco, np.random.default_rng(0))
    assert set(np.unique(out[0])) == {0.0, 0.5}  # donor of 0 is 1
    assert set(np.unique(out[2])) == {1.0, 0.0}  # donor of 2 wraps to 0
    assert occlude_batch(imgs, kps, TrainConfig(ssco_patches=0).ssco, None) is imgs


# --- full runs ----------------------------------------------------------------

@pytest.fixture(scope="module")
def sspcm_run(small_dataset, tmp_path_factory):
    out = tmp_path_factory.mktemp("run_sspcm")
    trainer = Trainer(TrainConfig(**TINY), small_dataset, out)
    return trainer, trainer.run(), out


def test_loss_aggregation(sspcm_run):
    _, report, _ = sspcm_run
    assert len(report.batch_log) == 2 * math.ceil(40 / 8)
    for row in report.batch_log:
        total = row["l_sup"] + 1.0 * (row["l_unsup1"] + row["l_unsup2"] + row["l_unsup3"])
        assert abs(row["l_final"] - total) <= 1e-12


def test_run_outputs(sspcm_run):
    trainer, report, out = sspcm_run
    lines = (out / "metrics.csv").read_text().splitlines()
    assert lines[0] == ",".join(CSV_COLUMNS) and len(lines) == 3
    assert sorted(p.name for p in (out / "snapshots").iterdir()) == \
        [f"epoch_{e:03d}_{n}.bin" for e in (0, 1) for n in "ABC"]
    assert set(report.final_test_pck) == {"A", "B", "C"}
    assert report.counters["teacher_mutations"] == 0
    assert report.counters["teacher_checks"] == 2 * 5 * 4
    assert report.counters["pcm_correct"] == 10
    assert len(trainer.cache) == 2 * 40


def test_determinism(small_dataset, sspcm_run, tmp_path):
    _, _, out = sspcm_run
    run_training(TrainConfig(**TINY), small_dataset, tmp_path)
    assert (tmp_path / "metrics.csv").read_bytes() == (out / "metrics.csv").read_bytes()


def test_role_symmetry(small_dataset, sspcm_run):
    _, report, _ = sspcm_run
    swapped = Trainer(TrainConfig(**TINY), small_dataset, swap_ab=True).run()
    for a, b in zip(report.rows, swapped.rows):
        assert a["pck_a"] == b["pck_b"] and a["pck_b"] == b["pck_a"]
        assert a["l_unsup1"] == b["l_unsup2"] and a["l_unsup2"] == b["l_unsup1"]
        assert a["l_sup"] == pytest.approx(b["l_sup"], abs=1e-12)
    assert report.final_test_pck["A"] == swapped.final_test_pck["B"]


def test_dual_never_touches_pcm_or_c(small_dataset, monkeypatch):
    def boom(*a, **k):
        raise AssertionError("PCM invoked in dual mode")

    monkeypatch.setattr(tr, "pcm_correct_batch", boom)
    trainer = Trainer(TrainConfig(method="dual", **TINY), small_dataset)
    report = trainer.run()
    assert "C" not in trainer.nets and trainer.cache is None
    assert report.counters["pcm_correct"] == 0 and report.counters["forward_C"] == 0
    assert report.counters["teacher_mutations"] == 0
    assert all(r["l_unsup3"] == 0 and math.isnan(r["pck_c"]) for r in report.rows)
    assert report.test_pck == report.final_test_pck["A"]


def test_supervised_has_no_unsup_loss(small_dataset):
    report = Trainer(TrainConfig(method="supervised", **TINY), small_dataset).run()
    assert all(r["l_unsup1"] == r["l_unsup2"] == r["l_unsup3"] == 0 for r in report.rows)
    assert report.counters["forward_A"] == 0


def test_beta_zero_matches_supervised(small_dataset):
    sup = Trainer(TrainConfig(method="supervised", **TINY), small_dataset)
    sup.run()
    zero = Trainer(TrainConfig(beta=0.0, **TINY), small_dataset)
    zero.run()
    assert zero.nets["C"].params.checksum() == sup.nets["C"].params.checksum()


def test_trainer_never_reads_oracle(small_dataset_dir, monkeypatch):
    from sspcm.synthdata import load_dataset
    real_open = builtins.open
    real_read = Path.read_bytes

    def guarded_open(file, *a, **k):
        assert "oracle" not in str(file), "oracle.json opened"
        return real_open(file, *a, **k)

    def guarded_read(self):
        assert "oracle" not in self.name, "oracle.json read"
        return real_read(self)

    monkeypatch.setattr(builtins, "open", guarded_open)
    monkeypatch.setattr(Path, "read_bytes", guarded_read)
    ds = load_dataset(small_dataset_dir)
    Trainer(TrainConfig(epochs=1, batch_size=8), ds).run()
