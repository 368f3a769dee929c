import numpy as np
import pytest

from nslogic.assurance import (
    AttackConfig,
    CorruptionConfig,
    MetricsReport,
    Record,
    accuracy_of,
    asr,
    attack_sweep,
    calibration_of,
    corrupt,
    corruption_sweep,
    csr,
    disparity,
    ece,
    emit_fact_map,
    evaluate,
    mce,
    meta_split,
    pgd_attack,
    per_group_of,
    read_pgm,
    shortcut_score,
    shortcut_score_from_probs,
)
from nslogic.perception import Pipeline, PerceptionModel, Sample, TrainConfig, train
from nslogic.tasks import builtin_program


# ---------------------------------------------------------------------------
# Calibration.


def brute_force_ece(confs, correct, bins):
    """Independent reference: explicit per-bin bookkeeping."""
    totals = [0] * bins
    conf_sums = [0.0] * bins
    acc_sums = [0.0] * bins
    for c, ok in zip(confs, correct):
        b = min(int(c * bins), bins - 1)
        totals[b] += 1
        conf_sums[b] += c
        acc_sums[b] += 1.0 if ok else 0.0
    n = sum(totals)
    value = 0.0
    for b in range(bins):
        if totals[b]:
            value += totals[b] / n * abs(acc_sums[b] / totals[b] - conf_sums[b] / totals[b])
    return value


def test_ece_perfectly_calibrated_is_zero():
    assert ece([1.0] * 10, [True] * 10) == 0.0


def test_ece_two_sample_hand_computation():
    # both land in one bin: |accuracy 0.5 - confidence 0.9| = 0.4
    assert ece([0.9, 0.9], [True, False], bins=10) == pytest.approx(0.4)
    assert mce([0.9, 0.9], [True, False], bins=10) == pytest.approx(0.4)


def test_ece_matches_reference_implementation():
    rng = np.random.default_rng(0)
    for _ in range(50):
        n = int(rng.integers(1, 200))
        confs = rng.uniform(0, 1, n)
        correct = confs > rng.uniform(0, 1, n)  # confidence-thresholded oracle
        assert ece(confs, correct) == pytest.approx(brute_force_ece(confs, correct, 15))


def test_mce_not_less_than_ece_on_random_inputs():
    rng = np.random.default_rng(1)
    for _ in range(1000):
        n = int(rng.integers(1, 50))
        confs = rng.uniform(0, 1, n)
        correct = rng.random(n) < confs
        assert mce(confs, correct) >= ece(confs, correct) - 1e-12


def test_ece_empty_input_rejected():
    with pytest.raises(ValueError):
        ece([], [])


# ---------------------------------------------------------------------------
# ASR / CSR / disparity.


def test_asr_direct_formula():
    assert asr(0.8, 0.2) == pytest.approx(0.75)
    assert asr(0.5, 0.5) == 0.0
    assert asr(0.5, 0.6) < 0  # attack helped; reported raw
    with pytest.raises(ValueError):
        asr(0.0, 0.0)


def test_asr_table_round_trip():
    # acc=0.283 with ASR=0.991 implies adversarial accuracy near 0.0025.
    acc, rate = 0.283, 0.991
    acc_adv = acc * (1 - rate)
    assert abs(acc_adv - 0.0025) <= 0.0005
    assert asr(acc, acc_adv) == pytest.approx(rate)


def test_csr_formula_and_suite_identity():
    assert csr(1.0, 0.5) == pytest.approx(0.5)
    assert csr(0.7, 0.7) == 0.0
    rng = np.random.default_rng(2)
    acc = 0.9
    suite = rng.uniform(0.3, 0.9, 20)  # 4 corruptions x 5 severities
    per_condition = [csr(acc, a) for a in suite]
    assert csr(acc, suite) == pytest.approx(np.mean(per_condition))
    assert csr(acc, suite) == pytest.approx(csr(acc, float(np.mean(suite))))


def test_meta_split_greedy_majority():
    counts = {"a": 50, "b": 30, "c": 15, "d": 5}
    majority, minority = meta_split(counts)
    assert majority == {"a"}
    assert minority == {"b", "c", "d"}


def test_disparity_identical_groups_is_zero():
    per_group = {"a": (90, 100), "b": (9, 10)}
    assert disparity(per_group, majority={"a"}) == pytest.approx(0.0)


def test_disparity_simple_gap():
    per_group = {"maj": (90, 100), "min": (40, 50)}
    assert disparity(per_group, majority={"maj"}) == pytest.approx(0.1)


def test_disparity_five_groups_matches_per_sample_recomputation():
    rng = np.random.default_rng(3)
    groups = [f"g{i}" for i in range(5)]
    sizes = [40, 25, 15, 12, 8]
    records = []
    for g, n in zip(groups, sizes):
        correct = rng.random(n) < rng.uniform(0.5, 1.0)
        records.extend(Record(0, 0, 0, 0.5, bool(c), g) for c in correct)
    per_group = per_group_of(records)
    majority, minority = meta_split({g: t for g, (_, t) in per_group.items()})
    got = disparity(per_group, majority)
    maj = [r for r in records if r.group in majority]
    mino = [r for r in records if r.group in minority]
    want = abs(
        sum(r.correct for r in maj) / len(maj) - sum(r.correct for r in mino) / len(mino)
    )
    assert got == pytest.approx(want)
    with pytest.raises(ValueError):
        disparity(per_group, majority=set(per_group))  # empty minority


# ---------------------------------------------------------------------------
# PGD.


@pytest.fixture(scope="module")
def trained_sum2():
    task = builtin_program("sum_digits", n=2, classes=3)
    session = task.compile(3)
    model = PerceptionModel.build("nesy", task.feature_dim, task.slots, heads=task.heads, hidden=16, seed=0)
    ds = task.make_dataset(120, seed=1)
    train(model, session, ds, TrainConfig(lr=0.1, epochs=6, batch_size=16, seed=0))
    return task, session, model


def test_pgd_epsilon_zero_is_identity(trained_sum2):
    task, session, model = trained_sum2
    pipe = Pipeline(model, session)
    sample = task.make_dataset(1, seed=2)[0]
    res = pgd_attack(pipe, sample, AttackConfig(epsilon=0.0, steps=5), seed=0)
    assert np.array_equal(res.adversarial, sample.features)
    assert res.pred_adv == res.pred_clean


def test_pgd_stays_in_ball_and_unit_box(trained_sum2):
    task, session, model = trained_sum2
    pipe = Pipeline(model, session)
    eps = 0.12
    for i, sample in enumerate(task.make_dataset(10, seed=3)):
        res = pgd_attack(pipe, sample, AttackConfig(epsilon=eps, steps=6), seed=i)
        delta = np.abs(res.adversarial - sample.features).max()
        assert delta <= eps + 1e-12
        assert res.adversarial.min() >= 0.0
        assert res.adversarial.max() <= 1.0


def test_pgd_ascends_loss_on_most_samples(trained_sum2):
    task, session, model = trained_sum2
    pipe = Pipeline(model, session)
    ds = task.make_dataset(40, seed=4)
    ascended = 0
    for i, sample in enumerate(ds):
        res = pgd_attack(pipe, sample, AttackConfig(epsilon=0.08, steps=10), seed=i)
        ascended += res.loss_adv >= res.loss_clean
    assert ascended / len(ds) >= 0.95


def test_pgd_deterministic(trained_sum2):
    task, session, model = trained_sum2
    pipe = Pipeline(model, session)
    sample = task.make_dataset(1, seed=5)[0]
    a = pgd_attack(pipe, sample, AttackConfig(epsilon=0.05, steps=4), seed=7)
    b = pgd_attack(pipe, sample, AttackConfig(epsilon=0.05, steps=4), seed=7)
    assert np.array_equal(a.adversarial, b.adversarial)


def test_attack_sweep_records(trained_sum2):
    task, session, model = trained_sum2
    pipe = Pipeline(model, session)
    ds = task.make_dataset(12, seed=6)
    clean = evaluate(pipe, ds)
    adv_records, _ = attack_sweep(pipe, ds, AttackConfig(epsilon=0.0, steps=1), seed=0)
    assert accuracy_of(adv_records) == accuracy_of(clean)  # epsilon 0: ASR exactly 0
    assert asr(accuracy_of(clean), accuracy_of(adv_records)) == 0.0


# ---------------------------------------------------------------------------
# Corruption.


def _img_sample(side=8, seed=0):
    rng = np.random.default_rng(seed)
    return Sample(rng.uniform(0, 1, (1, side * side)), 0)


def test_brightness_zero_shift_is_identity():
    from nslogic.assurance import _BRIGHTNESS_SHIFT

    s = _img_sample()
    out = corrupt(s, CorruptionConfig("brightness", 1))
    expected = np.clip(s.features + _BRIGHTNESS_SHIFT[0], 0, 1)
    assert np.allclose(out.features, expected)
    # the zero-shift analog: adding 0 and clipping changes nothing
    assert np.array_equal(np.clip(s.features + 0.0, 0, 1), s.features)


def test_gaussian_noise_severity_monotone():
    s = _img_sample(seed=1)
    mse = []
    for sev in range(1, 6):
        out = corrupt(s, CorruptionConfig("gaussian-noise", sev, seed=3))
        mse.append(float(((out.features - s.features) ** 2).mean()))
    assert all(a < b for a, b in zip(mse, mse[1:]))


def test_rotation_involution_at_180():
    from nslogic.assurance import _rotate_square

    rng = np.random.default_rng(2)
    img = rng.uniform(0, 1, 64)
    twice = _rotate_square(_rotate_square(img, 180.0), 180.0)
    assert np.array_equal(twice, img)


def test_occlusion_zeroes_patch():
    s = _img_sample(seed=3)
    out = corrupt(s, CorruptionConfig("occlusion", 5, seed=0))
    assert (out.features == 0).sum() >= 16  # 55% of an 8x8 side -> 4x4 patch at least
    assert out.features.min() >= 0.0


def test_corrupt_deterministic():
    s = _img_sample(seed=4)
    a = corrupt(s, CorruptionConfig("gaussian-noise", 3, seed=9), salt=5)
    b = corrupt(s, CorruptionConfig("gaussian-noise", 3, seed=9), salt=5)
    assert np.array_equal(a.features, b.features)


def test_corruption_sweep_identity_for_trivial_pipeline(trained_sum2):
    task, session, model = trained_sum2
    pipe = Pipeline(model, session)
    ds = task.make_dataset(8, seed=7)
    conditions = corruption_sweep(pipe, ds, kinds=("brightness",), severities=(1,), seed=0)
    assert set(conditions) == {("brightness", 1)}
    assert 0.0 <= conditions[("brightness", 1)] <= 1.0


# ---------------------------------------------------------------------------
# Shortcut inspection.


def test_constant_circuit_scores_one():
    probs = np.tile(np.linspace(0.1, 0.9, 12), (20, 1))
    report = shortcut_score_from_probs(probs, m=3)
    assert report.score == 1.0
    assert np.allclose(report.fact_variance, 0.0)


def test_oracle_fact_assignments_match_ground_truth_jaccard():
    task = builtin_program("pathfinder", side=3)
    session = task.compile(4)
    ds = task.make_dataset(40, seed=8)
    n_facts = session.n_facts
    probs = np.zeros((len(ds), n_facts))
    for i, s in enumerate(ds):
        probs[i, list(s.true_facts)] = 1.0
    m = int(round(np.mean([len(s.true_facts) for s in ds])))
    report = shortcut_score_from_probs(probs, m)
    # ground-truth mean Jaccard of the true fact sets, computed directly
    sets = [frozenset(s.true_facts) for s in ds]
    total, pairs = 0.0, 0
    for i in range(len(sets)):
        for j in range(i + 1, len(sets)):
            total += len(sets[i] & sets[j]) / len(sets[i] | sets[j])
            pairs += 1
    assert report.score == pytest.approx(total / pairs, abs=0.1)


def test_random_activations_match_analytic_expected_jaccard():
    from scipy.stats import hypergeom

    rng = np.random.default_rng(9)
    n, F, m = 60, 30, 5
    probs = rng.uniform(0, 1, (n, F))
    report = shortcut_score_from_probs(probs, m)
    # E[J] for two independent uniform m-subsets of [F]
    expectation = sum(
        hypergeom.pmf(i, F, m, m) * (i / (2 * m - i)) for i in range(0, m + 1)
    )
    assert report.score == pytest.approx(expectation, abs=0.05)


def test_shortcut_invariance_under_reordering_and_relabeling():
    rng = np.random.default_rng(10)
    probs = rng.uniform(0, 1, (15, 10))
    base = shortcut_score_from_probs(probs, 3).score
    shuffled = shortcut_score_from_probs(probs[rng.permutation(15)], 3).score
    relabeled = shortcut_score_from_probs(probs[:, rng.permutation(10)], 3).score
    assert base == pytest.approx(shuffled)
    assert base == pytest.approx(relabeled)


def test_shortcut_score_via_model():
    task = builtin_program("sum_digits", n=2, classes=3)
    session = task.compile(3)
    model = PerceptionModel.build("nesy", task.feature_dim, task.slots, heads=task.heads, hidden=8, seed=0)
    for layer in model.backbone:
        layer[0][:] = 0.0  # constant model: the Fig.-2-style failure mode
    ds = task.make_dataset(10, seed=11)
    report = shortcut_score(session, model, ds)
    assert report.score == 1.0
    assert report.constant_facts() == list(range(session.n_facts))
    with pytest.raises(ValueError):
        shortcut_score(session, model, ds[:1])


# ---------------------------------------------------------------------------
# Fact maps.


def test_fact_map_all_zero_is_black(tmp_path):
    dots, edges = emit_fact_map(np.zeros(9), np.zeros(12), 3, tmp_path)
    assert np.all(read_pgm(dots) == 0.0)
    assert np.all(read_pgm(edges) == 0.0)


def test_fact_map_single_white_pixel(tmp_path):
    probs = np.zeros(9)
    probs[4] = 1.0  # center of the 3x3 grid
    dots, _ = emit_fact_map(probs, np.zeros(12), 3, tmp_path)
    img = read_pgm(dots)
    assert img[1, 1] == 1.0
    assert img.sum() == 1.0


def test_fact_map_roundtrip(tmp_path):
    rng = np.random.default_rng(12)
    dots_in = np.round(rng.uniform(0, 1, 9) * 255) / 255
    edges_in = np.round(rng.uniform(0, 1, 12) * 255) / 255
    dots, edges = emit_fact_map(dots_in, edges_in, 3, tmp_path)
    assert np.allclose(read_pgm(dots).reshape(-1), dots_in, atol=1e-12)
    lattice = read_pgm(edges)
    assert lattice.shape == (5, 5)


def test_fact_map_rejects_bad_geometry(tmp_path):
    with pytest.raises(ValueError):
        emit_fact_map(np.zeros(8), np.zeros(12), 3, tmp_path)


# ---------------------------------------------------------------------------
# MetricsReport.


def test_metrics_report_json_roundtrip():
    rep = MetricsReport(
        task="sum_digits",
        mode="nesy",
        accuracy=0.9,
        ece=0.05,
        mce=0.2,
        asr=0.1,
        csr=0.2,
        disparity=None,
        shortcut_score=0.3,
        per_group_accuracy={"g0": 0.9},
        metadata={"seed": 1, "k_train": 3, "k_test": 3},
    )
    text = rep.to_json()
    again = MetricsReport.from_json(text)
    assert again == rep
    assert text == again.to_json()  # byte-stable


def test_metrics_report_invariants():
    with pytest.raises(ValueError):
        MetricsReport(task="t", mode="nn", accuracy=1.5)
    with pytest.raises(ValueError):
        MetricsReport(task="t", mode="nn", accuracy=0.5, ece=-0.1)
    MetricsReport(task="t", mode="nn", accuracy=0.5, asr=-0.3)  # negative ASR allowed


def test_calibration_of_records():
    records = [
        Record(0, 0, 0, 0.9, True),
        Record(1, 1, 0, 0.9, False),
    ]
    e, m = calibration_of(records, bins=10)
    assert e == pytest.approx(0.4)
    assert m == pytest.approx(0.4)
