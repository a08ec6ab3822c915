import math

import numpy as np
import pytest

from synstitch import geometry as geo
from synstitch import phantomgen as pg
from synstitch.storage import tree_hash


def polar_oracle(h, w, apex, r0, r1, angle):
    m = np.zeros((h, w), dtype=np.uint8)
    for y in range(h):
        for x in range(w):
            dx, dy = x - apex[0], y - apex[1]
            r = math.sqrt(dx * dx + dy * dy)
            a = math.degrees(math.atan2(dx, dy))
            m[y, x] = r0 <= r <= r1 and abs(a) <= angle / 2
    return m


def test_fov_full_disc():
    m = pg.gen_fov_mask(21, 21, (10, 10), (0, 8), 360.0)
    ys, xs = np.mgrid[0:21, 0:21]
    assert np.array_equal(m, ((xs - 10) ** 2 + (ys - 10) ** 2 <= 64).astype(np.uint8))


def test_fov_matches_polar_oracle_and_is_symmetric():
    for size in (32, 64):
        fov = pg.default_fov(size)
        m = pg.gen_fov_mask(size, size, **fov)
        assert np.array_equal(m, polar_oracle(size, size, fov["apex"], *fov["radius_range"], fov["angle_deg"]))
        assert np.array_equal(m, m[:, ::-1])
    assert pg.gen_fov_mask(32, 32, (15.5, -1), (4, 30), 60.0).sum() == polar_oracle(32, 32, (15.5, -1), 4, 30, 60).sum()


def test_fov_bad_args():
    with pytest.raises(pg.PhantomError):
        pg.gen_fov_mask(8, 8, (4, 0), (2, 6), 0.0)
    with pytest.raises(pg.PhantomError):
        pg.gen_fov_mask(8, 8, (4, 0), (6, 2), 60.0)


@pytest.mark.parametrize("size", [32, 64])
def test_subject_invariants(size):
    s = pg.gen_subject(3, 6, size)
    assert len(s.frames) == len(s.landmarks) == len(s.motion_log) == 6
    outside = s.fov_mask == 0
    for k, f in enumerate(s.frames):
        assert f.dtype == np.float32 and f.shape == (size, size)
        assert not f[outside].any()
        assert f[~outside].mean() > 10 * max(f[outside].mean(), 1e-12)
        pts = s.landmarks[k]
        assert len(pts) >= pg.MIN_LANDMARKS
        ix = np.floor(pts[:, 0] + 0.5).astype(int)
        iy = np.floor(pts[:, 1] + 0.5).astype(int)
        assert s.fov_mask[iy, ix].all()
        np.testing.assert_allclose(pts, s.motion_log[k].apply(s.landmarks[0]), atol=1e-9, rtol=0)
    assert np.array_equal(s.motion_log[0].matrix, np.eye(3))


def test_single_frame_subject_has_identity_motion():
    s = pg.gen_subject(1, 1, 32)
    assert len(s.motion_log) == 1 and np.array_equal(s.motion_log[0].matrix, np.eye(3))


def test_motion_stays_within_generation_ranges():
    s = pg.gen_subject(4, 40, 32)
    for a in s.motion_log:
        p = a.params
        assert abs(p["tx"]) <= 8 + 1e-9 and abs(p["ty"]) <= 8 + 1e-9
        assert abs(p["theta"]) <= math.pi / 24 + 1e-9
        assert 0.9 - 1e-9 <= p["sx"] <= 1.1 + 1e-9


def test_subject_deterministic():
    a, b = pg.gen_subject(9, 4, 32), pg.gen_subject(9, 4, 32)
    assert all(np.array_equal(x, y) for x, y in zip(a.frames, b.frames))
    c = pg.gen_subject(10, 4, 32)
    assert not np.array_equal(a.frames[0], c.frames[0])


def test_render_reproduces_frames():
    s = pg.gen_subject(2, 3, 32)
    for k in range(3):
        assert np.array_equal(s.render(s.motion_log[k]), s.frames[k])


def test_split_counts():
    assert pg.split_counts(17, (9, 3, 5)) == (9, 3, 5)
    assert sum(pg.split_counts(20, (9, 3, 5))) == 20
    assert min(pg.split_counts(3, (9, 3, 5))) == 1
    with pytest.raises(pg.PhantomError):
        pg.split_counts(2, (9, 3, 5))


def _cohort():
    return pg.generate_cohort(17, 25, 32, 7)


@pytest.fixture(scope="module")
def cohort():
    return _cohort()


def test_manifest_split_and_pairs(cohort):
    m = pg.build_manifest(cohort, (9, 3, 5), np.random.default_rng(0))
    tr, va, te = (set(m.split[k]) for k in ("train", "val", "test"))
    assert (len(tr), len(va), len(te)) == (9, 3, 5)
    assert not (tr & va or tr & te or va & te)
    assert len(m.eval_pairs) == 60
    assert {p["subject_id"] for p in m.eval_pairs} == te
    assert all(abs(p["moving"] - p["fixed"]) < 20 for p in m.eval_pairs)
    # no image serves two splits
    for e in m.entries:
        if e["role"] == "stitch_eval":
            assert e["subject_id"] in te
        else:
            assert e["subject_id"] in tr | va
    curated = [(e["subject_id"], e["frame_index"]) for e in m.entries if e["role"] == "curated"]
    assert len(curated) == len(set(curated)) == 12 * 25


def test_manifest_deterministic(cohort):
    a = pg.build_manifest(cohort, (9, 3, 5), np.random.default_rng(3)).to_dict()
    b = pg.build_manifest(cohort, (9, 3, 5), np.random.default_rng(3)).to_dict()
    assert a == b
    with pytest.raises(pg.PhantomError):
        pg.build_manifest(cohort[:2], (9, 3, 5), np.random.default_rng(0))


def test_eval_pairs_ground_truth(cohort):
    m = pg.build_manifest(cohort, (9, 3, 5), np.random.default_rng(0))
    pairs = pg.make_eval_pairs(m, cohort)
    assert len(pairs) == 60
    for p in pairs:
        assert p["gt_affine"].apply(p["keypoints_moving"]) == pytest.approx(p["keypoints_fixed"], abs=1e-9)
    # i == j gives the identity
    m.eval_pairs[0]["fixed"] = m.eval_pairs[0]["moving"]
    p0 = pg.make_eval_pairs(m, cohort, 1)[0]
    np.testing.assert_allclose(p0["gt_affine"].matrix, np.eye(3), atol=1e-12)


def test_content_pairs_share_fov_and_move_content(cohort):
    ranges = dict(t=(-8, 8), theta=(-0.1, 0.1), s=(0.9, 1.1))
    pairs = pg.make_content_pairs(cohort[:3], 6, ranges, np.random.default_rng(1), min_shift=4.0)
    for p in pairs:
        g = p["gt_affine"].params
        assert math.hypot(g["tx"], g["ty"]) >= 4.0
        assert np.array_equal(geo.threshold_mask(p["fixed"]), p["fov_mask"])
        assert np.array_equal(geo.threshold_mask(p["moving"]), p["fov_mask"])
        np.testing.assert_allclose(p["gt_affine"].apply(p["keypoints_moving"]), p["keypoints_fixed"], atol=1e-12)
    with pytest.raises(pg.PhantomError):
        pg.make_content_pairs(cohort[:1], 1, dict(t=(0, 1), theta=(0, 0), s=(1, 1)),
                              np.random.default_rng(0), min_shift=4.0)


def test_dataset_round_trip(tmp_path):
    subs = pg.generate_cohort(4, 3, 32, 5)
    m = pg.build_manifest(subs, (9, 3, 5), np.random.default_rng(0), n_eval_pairs=4)
    pg.save_dataset(tmp_path / "a", subs, m)
    back, m2 = pg.load_dataset(tmp_path / "a")
    assert m2.to_dict() == m.to_dict()
    for s, b in zip(subs, back):
        assert all(x.tobytes() == y.tobytes() for x, y in zip(s.frames, b.frames))
        assert np.array_equal(s.fov_mask, b.fov_mask)
        assert all(np.array_equal(x, y) for x, y in zip(s.landmarks, b.landmarks))
        assert all(np.array_equal(x.matrix, y.matrix) for x, y in zip(s.motion_log, b.motion_log))
    # regenerating from the same seed gives a byte-identical tree
    subs2 = pg.generate_cohort(4, 3, 32, 5)
    pg.save_dataset(tmp_path / "b", subs2, pg.build_manifest(subs2, (9, 3, 5), np.random.default_rng(0), n_eval_pairs=4))
    assert tree_hash(tmp_path / "a") == tree_hash(tmp_path / "b")
