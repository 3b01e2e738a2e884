"""Acceptance criteria, one test each.

Every test prints a single PASS/FAIL line (also collected into the
"acceptance criteria" section at the end of the pytest run) with the
measured value next to its tolerance, then asserts it.
"""

from __future__ import annotations

import math
import time

import numpy as np
import pytest

from recnet.engine import (
    Tensor,
    batchnorm2d,
    concat,
    conv2d,
    conv_transpose2d,
    dense,
    gradcheck,
    image_gradients,
    no_grad,
    prelu,
    sigmoid,
)
from recnet.losses import similarity_from_distance, target_similarity, total_loss
from recnet.metrics import SpatialIndex, pointssim
from recnet.model import RecNet, read_weights, save_weights
from recnet.pointcloud_io import PointCloud, Pose
from recnet.projection import ProjectionConfig, angular_resolution, project, project_indices, unproject
from recnet.retrieval import DescriptorRecord, OracleScorer, evaluate_pr, split_map_queries
from recnet.synthetic import SceneSpec, trajectory_poses
from recnet.training import TrainConfig, make_synthetic_sequence, train, validate
from recnet.transmission import (
    Quantization,
    deserialize_descriptors,
    mission_report,
    payload_size,
    record_size,
    serialize_descriptors,
)

F64 = np.float64

TABLE_ENCODER = [
    (16, 30, 443), (16, 14, 215), (32, 6, 102), (32, 3, 90), (64, 1, 82),
    (64, 1, 76), (128, 1, 72), (128, 1, 68), (256, 1, 66), (256, 1, 64),
]
TABLE_DECODER = [
    (256, 1, 66), (128, 1, 68), (128, 1, 70), (64, 1, 74), (64, 1, 82),
    (32, 2, 90), (32, 5, 102), (16, 13, 215), (16, 30, 443), (1, 64, 900),
]


def test_architecture_conformance(criterion):
    start = time.process_time()
    model = RecNet("kitti", seed=0).eval()
    x = np.random.default_rng(0).random((1, 1, 64, 900)).astype(np.float32)
    enc, dec = [], []
    with no_grad():
        beta = model.encode(x, enc)
        out = model.decode(beta, dec)
    elapsed = time.process_time() - start
    shapes = enc + dec
    matches = sum(a == b for a, b in zip(shapes, TABLE_ENCODER + TABLE_DECODER))
    ok = matches == 20 and len(shapes) == 20 and beta.shape == (1, 256, 64) and out.shape == (1, 1, 64, 900)
    ok = ok and elapsed < 10.0
    criterion(1, "architecture conformance", ok, f"{matches}/20 table shapes exact, bottleneck {tuple(beta.shape[1:])}, {elapsed:.1f}s CPU (< 10s)")
    assert ok


def _gradcheck_cases(seed):
    rng = np.random.default_rng(seed)

    def t(*shape):
        return Tensor(rng.normal(size=shape), dtype=F64)

    def w(*shape):
        return rng.normal(size=shape)

    cases = {}
    x, k, b, m = t(2, 2, 6, 7), t(3, 2, 2, 3), t(3), w(2, 3, 3, 5)
    cases["conv2d"] = (lambda x, k, b: (conv2d(x, k, b, stride=(2, 1)) * m).sum(), [x, k, b])
    x2, k2, b2, m2 = t(2, 3, 3, 4), t(3, 2, 2, 3), t(2), w(2, 2, 8, 10)
    cases["conv_transpose2d"] = (
        lambda x, k, b: (conv_transpose2d(x, k, b, stride=(2, 2), target=(8, 10), padding=(0, 1)) * m2).sum(),
        [x2, k2, b2],
    )
    for training in (True, False):
        xb, g, be, mb = t(3, 2, 2, 3), t(2), t(2), w(3, 2, 2, 3)
        rm, rv = rng.normal(size=2), rng.uniform(0.5, 2, size=2)
        cases[f"batchnorm2d[{'train' if training else 'eval'}]"] = (
            lambda x, g, b, rm=rm, rv=rv, mb=mb, tr=training: (batchnorm2d(x, g, b, rm.copy(), rv.copy(), tr) * mb).sum(),
            [xb, g, be],
        )
    xp = Tensor(np.sign(rng.normal(size=(2, 3, 4))) * rng.uniform(0.1, 2, size=(2, 3, 4)), dtype=F64)
    mp = w(2, 3, 4)
    cases["prelu"] = (lambda x, a: (prelu(x, a) * mp).sum(), [xp, Tensor(np.array(0.25), dtype=F64)])
    xd, wd, bd, md = t(4, 6), t(3, 6), t(3), w(4, 3)
    cases["dense"] = (lambda x, k, b: (dense(x, k, b) * md).sum(), [xd, wd, bd])
    xs, ms = t(5, 3), w(5, 3)
    cases["sigmoid"] = (lambda x: (sigmoid(x) * ms).sum(), [xs])
    xi, mu, mv = t(2, 1, 4, 5), w(2, 1, 4, 5), w(2, 1, 4, 5)

    def grads(x):
        du, dv = image_gradients(x)
        return (du * mu).sum() + (dv * mv).sum()

    cases["image_gradients"] = (grads, [xi])
    a, c = t(3, 4), t(1, 4)
    cases["elementwise"] = (
        lambda a, c: (a * c - c).square().mean() + (a / 3.0).exp().sum() + concat([a, c], 0)[1:3].reshape(-1).abs().sum(),
        [a, c],
    )
    # full composite: conv -> bn -> prelu -> transposed conv reconstruction, tail-like dense -> sigmoid score
    img, k1, kt = Tensor(rng.random((2, 1, 6, 8)), dtype=F64), t(2, 1, 3, 3), t(2, 1, 3, 3)
    g1, be1, a1, wt = t(2), t(2), Tensor(np.array(0.25), dtype=F64), t(1, 2 * 4 * 6)
    crm, crv = np.zeros(2), np.ones(2)
    c_target = rng.random(2)

    def composite(k1, g1, be1, kt, wt):
        h = prelu(batchnorm2d(conv2d(img, k1), g1, be1, crm.copy(), crv.copy(), True), a1)
        recon = conv_transpose2d(h, kt, target=(6, 8))
        score = sigmoid(dense(h.reshape(2, -1), wt)).reshape(2)
        return total_loss(img, recon, c_target, score)[0]

    cases["composite loss"] = (composite, [k1, g1, be1, kt, wt])
    return cases


def test_gradient_correctness(criterion):
    start = time.process_time()
    worst: dict[str, float] = {}
    counts: dict[str, int] = {}
    for seed in range(5):
        for name, (f, inputs) in _gradcheck_cases(seed).items():
            # float64, step small enough to stay clear of abs / PReLU kinks but above roundoff
            err = gradcheck(f, inputs, h=1e-5)
            worst[name] = max(worst.get(name, 0.0), err)
            counts[name] = counts.get(name, 0) + 1
    elapsed = time.process_time() - start
    top = max(worst, key=worst.get)
    ok = all(v < 1e-4 for v in worst.values()) and min(counts.values()) >= 5 and elapsed < 120
    criterion(
        2,
        "gradient correctness",
        ok,
        f"{len(worst)} operators x {min(counts.values())} instances, max rel err {worst[top]:.2e} ({top}) (< 1e-4), {elapsed:.1f}s CPU (< 120s)",
    )
    assert ok


def test_projection_round_trip(criterion):
    start = time.process_time()
    cfg = ProjectionConfig.kitti()
    rng = np.random.default_rng(11)
    n = 10_000
    yaw = rng.uniform(-math.pi, math.pi, n)
    pitch = rng.uniform(-cfg.fov_down, cfg.fov_up, n)
    pitch = pitch[(pitch > -cfg.fov_down) & (pitch < cfg.fov_up)]
    yaw = yaw[: len(pitch)]
    r = rng.uniform(2.0, 80.0, len(pitch))
    pts = np.stack([r * np.cos(pitch) * np.cos(yaw), r * np.cos(pitch) * np.sin(yaw), r * np.sin(pitch)], 1)
    data, winners = project_indices(pts, cfg)
    image = project(PointCloud(pts), cfg)
    out = unproject(image).points
    # unproject walks pixels in row-major order, as do the winner indices
    src = pts[winners]
    du, dv = angular_resolution(cfg)
    rs = np.linalg.norm(src, axis=1)
    bound = rs * (du / math.sqrt(2) + dv / math.sqrt(2))
    pos_err = np.linalg.norm(out - src, axis=1)
    range_err = np.abs(np.linalg.norm(out, axis=1) - rs)
    passed = (pos_err <= bound) & (range_err <= 1e-5)
    elapsed = time.process_time() - start
    ok = len(pts) == n and passed.all() and elapsed < 5.0
    criterion(
        3,
        "projection round trip",
        ok,
        f"{passed.sum()}/{len(out)} non-collided points pass ({n - len(out)} collided), "
        f"max err/bound {np.max(pos_err / bound):.3f}, max range err {range_err.max():.1e} m (<= 1e-5), {elapsed:.1f}s CPU",
    )
    assert ok


@pytest.mark.slow
def test_overfit_gate(criterion):
    start = time.process_time()
    seq = make_synthetic_sequence(SceneSpec(n_scans=20), seed=0)
    config = TrainConfig(steps=2000, lr=1e-3, r_pos=5.0, r_neg=10.0, checkpoint_interval=0)
    result = train(seq, None, config)
    l_mse, c_err = validate(result.model, seq, config)
    step50, step2000 = result.reports[49].total, result.reports[-1].total
    elapsed = time.process_time() - start
    ok = l_mse < 0.01 and c_err < 0.05 and step2000 < 0.2 * step50 and elapsed < 1800
    criterion(
        4,
        "overfit gate",
        ok,
        f"train l_mse {l_mse:.4f} (< 0.01), mean |c_hat - c| {c_err:.4f} (< 0.05), "
        f"total loss step 2000 {step2000:.4f} vs 0.2 x step 50 {0.2 * step50:.4f}, {elapsed / 60:.1f} min CPU (< 30)",
    )
    assert ok


def _bruteforce_pr(db_records, queries, radius, thresholds, m):
    rows = []
    for t in thresholds:
        tp = accepted = relevant = 0
        for q in queries:
            best, best_score = None, -math.inf
            for rec in db_records:
                s = math.exp(-math.dist(q.pose.translation, rec.pose.translation) / m)
                if s > best_score or (s == best_score and rec.scan_id < best.scan_id):
                    best, best_score = rec, s
            relevant += any(math.dist(q.pose.translation, rec.pose.translation) <= radius for rec in db_records)
            if best_score >= t:
                accepted += 1
                tp += math.dist(q.pose.translation, best.pose.translation) <= radius
        rows.append((t, tp / accepted if accepted else 1.0, tp / relevant if relevant else 0.0))
    return rows


def test_retrieval_oracle_equivalence(criterion):
    start = time.process_time()
    spec = SceneSpec(trajectory="loop", n_scans=41, radius=12.0, laps=2.0)
    poses = trajectory_poses(spec)
    zero = np.zeros((128, 32), np.float32)
    records = [DescriptorRecord(i, zero, p, i / spec.rate_hz) for i, p in enumerate(poses)]
    db, queries = split_map_queries(records, 2.05)
    radius, m, eps = 3.0, 10.0, 1e-9
    t_star = math.exp(-radius / m) - eps
    thresholds = sorted({t_star, *np.round(np.linspace(0, 1, 21), 10).tolist()})
    curve = evaluate_pr(db, queries, OracleScorer(m), radius, thresholds)
    brute = _bruteforce_pr(list(db), queries, radius, thresholds, m)
    at = thresholds.index(t_star)
    p, r = curve.precision[at], curve.recall[at]
    elapsed = time.process_time() - start
    ok = curve.rows() == brute and p == 1.0 and r == 1.0 and elapsed < 60
    criterion(
        5,
        "retrieval oracle equivalence",
        ok,
        f"{len(queries)} queries vs {len(db)} map scans: precision {p}, recall {r} at exp(-3/10)-eps, "
        f"brute force match on {len(thresholds)} thresholds: {curve.rows() == brute}, {elapsed:.1f}s CPU",
    )
    assert ok


def _brute_knn(points, q, k):
    d = np.linalg.norm(points - q, axis=1)
    return np.lexsort((np.arange(len(points)), d))[:k]


def test_metrics_sanity(criterion):
    start = time.process_time()
    rng = np.random.default_rng(21)
    cloud = rng.uniform(-15, 15, size=(1500, 3))
    same = pointssim(cloud, cloud).row()
    geom = []
    for sigma in (0.01, 0.05, 0.1):
        noisy = cloud + np.random.default_rng(5).normal(scale=sigma, size=cloud.shape)
        geom.append(pointssim(cloud, noisy).geom_sim)
    knn_ok = True
    n_clouds = 0
    for n in (1, 2, 5, 17, 64, 200, 333, 500):
        for kind in ("uniform", "lattice"):
            pts = rng.uniform(-3, 3, size=(n, 3))
            if kind == "lattice":
                pts = np.round(pts * 2) / 2  # many equidistant neighbours
            index = SpatialIndex(pts)
            qs = np.concatenate([pts[: min(n, 25)], rng.uniform(-3, 3, size=(25, 3))])
            for k in sorted({1, min(5, n), min(10, n), n}):
                _, idx = index.query(qs, k)
                knn_ok &= all(np.array_equal(idx[i], _brute_knn(pts, q, k)) for i, q in enumerate(qs))
            n_clouds += 1
    elapsed = time.process_time() - start
    ok = same == (100.0, 100.0, 100.0, 100.0) and geom[0] > geom[1] > geom[2] and knn_ok and elapsed < 120
    criterion(
        6,
        "metrics sanity",
        ok,
        f"identical clouds {same}, GeomSim by jitter {[round(g, 3) for g in geom]} strictly decreasing, "
        f"knn = brute force on {n_clouds} clouds <= 500 pts: {knn_ok}, {elapsed:.1f}s CPU",
    )
    assert ok


def test_bandwidth_arithmetic(criterion):
    start = time.process_time()
    descriptor = payload_size((256, 64), Quantization.FLOAT32)
    stats = mission_report([(100_000, 100_000 * 16)] * 100, [descriptor] * 100, 10.0)
    # closed form by hand: 100 * 1.6e6 B / 10 s = 16,000 kB/s; 100 * 65,536 B / 10 s = 655.36 kB/s
    scan_ratio = 120_000 * 16 / record_size((256, 64), Quantization.FLOAT32)
    elapsed = time.process_time() - start
    ok = (
        stats.raw_rate == pytest.approx(16_000.0, abs=1e-9)
        and stats.descriptor_rate == pytest.approx(655.36, abs=1e-9)
        and abs(stats.ratio - 24.41) <= 0.01
        and scan_ratio > 10
        and elapsed < 5
    )
    criterion(
        7,
        "bandwidth arithmetic",
        ok,
        f"raw {stats.raw_rate:,.2f} kB/s, descriptor {stats.descriptor_rate:.2f} kB/s, ratio {stats.ratio:.4f} (24.41 +/- 0.01), "
        f"120k-point scan / descriptor record {scan_ratio:.1f}x (> 10)",
    )
    assert ok


def test_serialization(criterion, tmp_path):
    start = time.process_time()
    rng = np.random.default_rng(8)
    records = [
        DescriptorRecord(i, (rng.normal(size=(256, 64)) * rng.uniform(0.1, 10) + rng.normal()).astype(np.float32),
                         Pose.from_yaw(rng.uniform(-3, 3), rng.normal(size=3)), 0.1 * i)
        for i in range(1000)
    ]
    f32 = deserialize_descriptors(serialize_descriptors(records[:50], "float32"))
    recb_exact = all(a.bottleneck.tobytes() == b.bottleneck.tobytes() for a, b in zip(records, f32.records))

    model = RecNet("kitti", seed=3)
    save_weights(model, tmp_path / "w.rwts")
    _, state = read_weights(tmp_path / "w.rwts")
    rwts_exact = all(state[k].tobytes() == v.tobytes() for k, v in model.state_dict().items())

    u8 = deserialize_descriptors(serialize_descriptors(records, "uint8"))
    worst_affine, worst_total = 0.0, 0.0
    within = 0
    for a, b in zip(records, u8.records):
        x = a.bottleneck.astype(np.float64)
        err = np.max(np.abs(b.bottleneck.astype(np.float64) - x))
        affine = (x.max() - x.min()) / 510.0
        half_ulp = float(np.spacing(np.max(np.abs(a.bottleneck)))) / 2.0
        worst_affine = max(worst_affine, err / affine)
        worst_total = max(worst_total, err / (affine + half_ulp))
        within += err <= affine + half_ulp
    elapsed = time.process_time() - start
    ok = recb_exact and rwts_exact and within == 1000 and elapsed < 30
    criterion(
        8,
        "serialization",
        ok,
        f"RECB float32 bit-exact {recb_exact}, RWTS bit-exact {rwts_exact}, uint8 within (max-min)/510 "
        f"(+ float32 half-ulp of the decoded value) on {within}/1000 descriptors, "
        f"worst err/bound {worst_total:.6f} (err/affine term alone {worst_affine:.6f}), {elapsed:.1f}s CPU",
    )
    assert ok


def test_similarity_target(criterion):
    c0 = target_similarity(Pose(), Pose())
    c10 = target_similarity(Pose(), Pose.from_translation(10.0, 0.0, 0.0), m=10.0)
    grid = similarity_from_distance(np.linspace(0.0, 100.0, 100), m=10.0)
    monotone = bool(np.all(np.diff(grid) < 0))
    ok = c0 == 1.0 and abs(c10 - 0.3679) <= 1e-4 and monotone
    criterion(9, "similarity target", ok, f"C(0)={c0}, C(10 m; m=10)={c10:.6f} (0.3679 +/- 1e-4), strictly decreasing on 100 points: {monotone}")
    assert ok
