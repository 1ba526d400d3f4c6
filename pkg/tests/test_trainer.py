"""Augmentation geometry, pseudo-labels, EMA, schedule and the training loop."""

import json

import numpy as np
import pytest
from hypothesis import given, settings, strategies as st

from tabdet import tensor as T
from tabdet.augment import IDENTITY_CROP, StrongConfig, ViewTransform, photometric, strong_augment, weak_augment
from tabdet.model import Detector, ModelConfig, scores_and_boxes
from tabdet.optim import OptimState
from tabdet.synthdata import ConfigError, GenConfig, generate_dataset, make_splits
from tabdet.trainer import (TrainerConfig, TrainState, ema_update, generate_pseudo_labels, lr_schedule,
                            run_training, select_pseudo_labels, steps_per_epoch, train_step)

TINY = ModelConfig.tiny().to_dict()


def tiny_cfg(**kw):
    base = dict(model=TINY, lr=1e-3, batch_size=4, burn_in=2, epochs=2, steps_per_epoch=2, seed=5)
    base.update(kw)
    return TrainerConfig(**base)


@pytest.fixture(scope="module")
def docs():
    return generate_dataset(12, 3, GenConfig(size=32))


@pytest.fixture(scope="module")
def split():
    return make_splits(8, 0.25, 0, n_val=4)


def fresh_state(cfg):
    student = Detector(cfg.model_config(), seed=cfg.seed)
    return TrainState(student, student.clone(), OptimState(lr=cfg.lr, weight_decay=cfg.weight_decay))


def random_boxes(rng, n):
    return np.column_stack([rng.uniform(0.1, 0.9, (n, 2)), rng.uniform(0.02, 0.5, (n, 2))])


class TestViewTransform:
    def test_flip_involution(self):
        img = np.random.default_rng(0).random((8, 6))
        t = ViewTransform(flip=True)
        boxes = random_boxes(np.random.default_rng(1), 5)
        np.testing.assert_array_equal(t.render(t.render(img)), img)
        np.testing.assert_allclose(t.apply(t.apply(boxes)), boxes, atol=1e-15)

    def test_flip_arithmetic(self):
        t = ViewTransform(flip=True)
        assert t.apply([[0.3, 0.4, 0.2, 0.1]])[0].tolist() == pytest.approx([0.7, 0.4, 0.2, 0.1], abs=1e-15)
        assert t.apply([[0.5, 0.4, 0.2, 0.1]])[0, 0] == 0.5

    def test_identity_crop(self):
        img = np.random.default_rng(2).random((8, 8))
        t = ViewTransform(False, (1.0, 1.0), IDENTITY_CROP)
        np.testing.assert_array_equal(t.render(img), img)
        b = random_boxes(np.random.default_rng(3), 4)
        np.testing.assert_array_equal(t.apply(b), b)

    def test_round_trip_many(self):
        rng = np.random.default_rng(4)
        worst = 0.0
        for _ in range(1000):
            side = 1 / rng.uniform(1.0, 2.0)
            x0, y0 = rng.uniform(0, 1 - side, 2)
            t = ViewTransform(bool(rng.random() < 0.5), (1 / side, 1 / side), (x0, y0, x0 + side, y0 + side))
            b = random_boxes(rng, 10)
            worst = max(worst, np.abs(t.invert(t.apply(b)) - b).max())
        assert worst <= 1e-9

    def test_crop_render_matches_boxes(self):
        # a dark rectangle rendered through a crop lands where the mapped box says
        img = np.ones((64, 64))
        img[16:32, 24:48] = 0.0
        box = np.array([[36 / 64, 24 / 64, 24 / 64, 16 / 64]])
        t = ViewTransform(True, (2.0, 2.0), (0.25, 0.125, 0.75, 0.625))
        view = t.render(img)
        vb = t.apply(box)[0] * 64
        cx, cy = vb[0], vb[1]
        assert view[int(cy), int(cx)] == 0.0
        assert view[int(cy - vb[3] / 2) - 2, int(cx)] == 1.0

    def test_to_view_drops_hidden(self):
        t = ViewTransform(False, (2.0, 2.0), (0.0, 0.0, 0.5, 0.5))
        kept = t.to_view([[0.25, 0.25, 0.2, 0.2], [0.8, 0.8, 0.2, 0.2], [0.5, 0.25, 0.25, 0.25]])
        assert len(kept) == 2
        assert ((kept[:, :2] - kept[:, 2:] / 2) >= 0).all() and ((kept[:, :2] + kept[:, 2:] / 2) <= 1 + 1e-12).all()


class TestAugment:
    def test_weak_flip_rate(self):
        flips = [weak_augment(np.zeros((4, 4)), None, np.random.default_rng(s))[2].flip for s in range(400)]
        assert 150 < sum(flips) < 250

    def test_weak_maps_boxes(self):
        img = np.random.default_rng(0).random((8, 8))
        for s in range(10):
            v, b, t = weak_augment(img, [[0.3, 0.5, 0.2, 0.2]], np.random.default_rng(s))
            assert b[0, 0] == pytest.approx(0.7 if t.flip else 0.3, abs=1e-15)
            np.testing.assert_array_equal(v, img[:, ::-1] if t.flip else img)

    def test_strong_round_trip(self, docs):
        for s in range(50):
            doc = docs[s % len(docs)]
            _, vb, t = strong_augment(doc.image, doc.boxes, np.random.default_rng(s))
            assert len(vb) >= 1
            np.testing.assert_allclose(t.invert(t.apply(doc.boxes)), doc.boxes, atol=1e-12)

    def test_photometric_does_not_touch_geometry(self, docs):
        quiet = StrongConfig(erase_p=0.0, blur_p=0.0)
        for s in range(20):
            _, b1, t1 = strong_augment(docs[0].image, docs[0].boxes, np.random.default_rng(s))
            _, b2, t2 = strong_augment(docs[0].image, docs[0].boxes, np.random.default_rng(s), quiet)
            assert t1 == t2
            np.testing.assert_array_equal(b1, b2)

    def test_photometric_range(self):
        img = np.random.default_rng(1).random((16, 16))
        out = photometric(img, np.random.default_rng(0), StrongConfig(erase_p=1.0, blur_p=1.0))
        assert out.shape == img.shape and out.min() >= 0 and out.max() <= 1

    def test_seeded(self, docs):
        a = strong_augment(docs[1].image, docs[1].boxes, np.random.default_rng(9))
        b = strong_augment(docs[1].image, docs[1].boxes, np.random.default_rng(9))
        assert np.array_equal(a[0], b[0]) and np.array_equal(a[1], b[1]) and a[2] == b[2]


class TestPseudoLabels:
    def test_example_selection(self):
        boxes = random_boxes(np.random.default_rng(0), 4)
        kb, ks = select_pseudo_labels([0.75, 0.9, 0.72, 0.8], boxes, 0.7, 3)
        assert ks.tolist() == [0.9, 0.8, 0.75]
        np.testing.assert_array_equal(kb, boxes[[1, 3, 0]])

    def test_all_below(self):
        kb, ks = select_pseudo_labels([0.1, 0.6], np.zeros((2, 4)), 0.7, 3)
        assert kb.shape == (0, 4) and ks.size == 0

    def test_degenerate_filter(self):
        boxes = random_boxes(np.random.default_rng(1), 6)
        kb, _ = select_pseudo_labels(np.random.default_rng(2).random(6), boxes, 0.0, 6)
        assert len(kb) == 6

    @given(st.lists(st.floats(0, 1), min_size=0, max_size=12), st.floats(0, 1), st.integers(1, 5))
    def test_invariants(self, scores, tau, k):
        kb, ks = select_pseudo_labels(scores, np.tile([0.5, 0.5, 0.1, 0.1], (len(scores), 1)), tau, k)
        assert len(ks) <= k and (ks >= tau).all()
        assert len(ks) == min(k, sum(s >= tau for s in scores))
        assert (np.diff(ks) <= 0).all()

    def test_generation_maps_back(self, docs):
        teacher = Detector(ModelConfig.tiny(), seed=1)
        cfg = tiny_cfg(threshold=0.0, topk=4)
        imgs = np.stack([d.image for d in docs[:4]])
        rngs = [np.random.default_rng(s) for s in range(4)]
        sets = generate_pseudo_labels(teacher, imgs, cfg, rngs)
        for img, pl, s in zip(imgs, sets, range(4)):
            t = pl.source
            assert t == weak_augment(img, None, np.random.default_rng(s))[2]
            with T.no_grad():
                sc, bx = scores_and_boxes(teacher(t.render(img)[None])[-1])
            order = np.argsort(-sc[0], kind="stable")
            np.testing.assert_allclose(pl.boxes, t.invert(bx[0][order]), atol=1e-15)
            assert len(pl) == 4
        assert all(p.grad is None or not np.any(p.grad) for p in teacher.params.values())


class TestEMA:
    def test_m_one_and_zero(self):
        a, b = Detector(ModelConfig.tiny(), seed=0), Detector(ModelConfig.tiny(), seed=1)
        before = a.state_dict()
        ema_update(a.params, b.params, 1.0)
        assert all(np.array_equal(before[k], a.params[k].data) for k in before)
        ema_update(a.params, b.params, 0.0)
        assert all(np.array_equal(b.params[k].data, a.params[k].data) for k in before)

    def test_contraction(self):
        t, s = Detector(ModelConfig.tiny(), seed=0), Detector(ModelConfig.tiny(), seed=1)

        def dist():
            return np.sqrt(sum(np.sum((t.params[k].data - s.params[k].data) ** 2) for k in t.params))

        m = 0.9
        prev = dist()
        for _ in range(100):
            ema_update(t.params, s.params, m)
            cur = dist()
            assert abs(cur - m * prev) <= 1e-12 * max(prev, 1e-300) + 1e-300
            prev = cur

    def test_mismatch(self):
        a = Detector(ModelConfig.tiny(), seed=0)
        b = Detector(ModelConfig(**{**TINY, "queries": 5}), seed=0)
        with pytest.raises(T.DimensionError):
            ema_update(a.params, b.params, 0.5)


class TestSchedule:
    def test_twelve_epochs(self):
        cfg = TrainerConfig(epochs=12, lr=1e-3)
        assert cfg.drop_epoch == 11
        assert [lr_schedule(e, cfg) for e in (0, 10)] == [1e-3, 1e-3]
        assert lr_schedule(11, cfg) == pytest.approx(1e-4, rel=1e-15)

    def test_default_desk_schedule(self):
        assert TrainerConfig().drop_epoch == 55

    def test_explicit(self):
        assert lr_schedule(3, TrainerConfig(epochs=10, lr_drop_epoch=3, lr=1.0)) == pytest.approx(0.1)

    def test_steps_per_epoch(self):
        assert steps_per_epoch(20, 180, TrainerConfig(batch_size=8)) == 45


class TestConfig:
    def test_json_round_trip(self, tmp_path):
        cfg = tiny_cfg(threshold=0.9)
        (tmp_path / "c.json").write_text(json.dumps(cfg.to_dict()))
        assert TrainerConfig.from_json(tmp_path / "c.json") == cfg

    @pytest.mark.parametrize("kw", [{"threshold": 1.5}, {"topk": 0}, {"alpha": -1}, {"ema_momentum": 2},
                                    {"batch_size": 1}, {"burn_in": -1}])
    def test_invalid(self, kw):
        with pytest.raises(ConfigError):
            TrainerConfig(**kw)

    def test_unknown_field(self):
        with pytest.raises(ConfigError, match="bogus"):
            TrainerConfig.from_dict({"bogus": 1})


class TestTrainStep:
    def test_burn_in_supervised(self, docs):
        cfg = tiny_cfg(burn_in=5)
        st_ = fresh_state(cfg)
        res = train_step(st_, docs[:2], docs[2:4], cfg, 0)
        assert res.report.total == res.report.supervised and res.report.unsupervised == 0.0
        assert not st_.teacher_ready and res.n_pseudo == 0

    def test_composition_bit_exact(self, docs):
        cfg = tiny_cfg(burn_in=0, threshold=0.0, alpha=0.25)
        st_ = fresh_state(cfg)
        for step in range(3):
            r = train_step(st_, docs[:2], docs[2:4], cfg, 0).report
            assert r.unsupervised > 0
            # L is formed by exactly one rounded addition; the subtraction form holds to one ulp
            assert r.total == r.supervised + 0.25 * r.unsupervised
            assert abs((r.total - r.supervised) - 0.25 * r.unsupervised) <= np.spacing(r.total)

    def test_teacher_only_moved_by_ema(self, docs):
        cfg = tiny_cfg(burn_in=0, threshold=0.0)
        st_ = fresh_state(cfg)
        train_step(st_, docs[:2], docs[2:4], cfg, 0)
        before = st_.teacher.state_dict()
        train_step(st_, docs[:2], docs[2:4], cfg, 0)
        m = cfg.ema_momentum
        for k, v in before.items():
            expect = m * v + (1 - m) * st_.student.params[k].data
            np.testing.assert_array_equal(st_.teacher.params[k].data, expect)

    def test_teacher_copied_once(self, docs):
        cfg = tiny_cfg(burn_in=1)
        st_ = fresh_state(cfg)
        train_step(st_, docs[:2], docs[2:4], cfg, 0)
        snapshot = st_.student.state_dict()
        train_step(st_, docs[:2], docs[2:4], cfg, 0)
        assert st_.teacher_ready
        m = cfg.ema_momentum
        k = "head.box2.b"
        np.testing.assert_allclose(st_.teacher.params[k].data,
                                   m * snapshot[k] + (1 - m) * st_.student.params[k].data, atol=1e-15)

    def test_deterministic(self, docs):
        cfg = tiny_cfg(burn_in=1, threshold=0.0)
        runs = []
        for _ in range(2):
            st_ = fresh_state(cfg)
            runs.append([train_step(st_, docs[:2], docs[2:4], cfg, 0).report.total for _ in range(3)])
        assert runs[0] == runs[1]

    def test_no_augment_uses_raw_pages(self, docs):
        cfg = tiny_cfg(augment=False)
        a, b = fresh_state(cfg), fresh_state(cfg)
        r1 = train_step(a, docs[:2], [], cfg, 0).report.total
        r2 = train_step(b, docs[:2], [], tiny_cfg(augment=False, seed=5), 0).report.total
        assert r1 == r2


class TestRunTraining:
    def test_alpha_zero_matches_supervised_only(self, docs, split):
        semi = run_training(docs, split, tiny_cfg(alpha=0.0, threshold=0.0))
        sup = run_training(docs, split, tiny_cfg(supervised_only=True))
        assert semi.state.teacher_ready and not sup.state.teacher_ready
        assert [r["L"] for r in semi.losses] == [r["L"] for r in sup.losses]
        for k, p in semi.state.student.params.items():
            assert np.array_equal(p.data, sup.state.student.params[k].data), k

    def test_history_length_and_files(self, docs, split, tmp_path):
        res = run_training(docs, split, tiny_cfg(epochs=4, eval_interval=2), out_dir=tmp_path)
        assert len(res.history) == 2
        lines = (tmp_path / "metrics.jsonl").read_text().splitlines()
        assert [json.loads(x)["epoch"] for x in lines] == [2, 4]
        assert (tmp_path / "final.ckpt").exists() and (tmp_path / "student.ckpt").exists()
        assert res.history[-1]["evaluated"] == "teacher"

    def test_supervised_only_zero_unsup(self, docs, split):
        res = run_training(docs, split, tiny_cfg(supervised_only=True))
        assert all(r["L_u"] == 0.0 for r in res.losses)

    def test_empty_labeled(self, docs):
        split = make_splits(8, 0.25, 0, n_val=2)
        split.labeled = []
        with pytest.raises(ConfigError):
            run_training(docs, split, tiny_cfg())

    def test_missing_ids(self, docs):
        with pytest.raises(ConfigError):
            run_training(docs[:5], make_splits(8, 0.25, 0, n_val=2), tiny_cfg())

    def test_reproducible(self, docs, split):
        a = run_training(docs, split, tiny_cfg(threshold=0.0))
        b = run_training(docs, split, tiny_cfg(threshold=0.0))
        assert a.losses == b.losses
        assert a.final.to_dict() == b.final.to_dict()


class TestPseudoNMS:
    def test_off_by_default(self):
        assert TrainerConfig().pseudo_nms is None

    def test_duplicates_suppressed_before_topk(self):
        boxes = np.array([[0.5, 0.5, 0.2, 0.2], [0.51, 0.5, 0.2, 0.2], [0.2, 0.2, 0.1, 0.1], [0.8, 0.8, 0.1, 0.1]])
        scores = [0.95, 0.9, 0.8, 0.75]
        plain, _ = select_pseudo_labels(scores, boxes, 0.7, 2)
        nms, ks = select_pseudo_labels(scores, boxes, 0.7, 2, nms_iou=0.5)
        np.testing.assert_array_equal(plain, boxes[[0, 1]])
        np.testing.assert_array_equal(nms, boxes[[0, 2]])
        assert ks.tolist() == [0.95, 0.8]

    def test_invalid(self):
        with pytest.raises(ConfigError):
            TrainerConfig(pseudo_nms=0.0)
