import hashlib
import math

import numpy as np
import pytest
from hypothesis import given, settings, strategies as st

from spinefuse import phantom as ph
from spinefuse.errors import DomainError, ParameterError
from spinefuse.labels import GAP


def isolated(amp=2.0, sigma=4.0, **kw):
    """One dominant bump at 75 mm; the others sit far away and are tiny."""
    return ph.SpinePhantom(
        scan_length=400.0,
        vertebra_centers=(75.0, 200.0, 250.0, 300.0, 350.0),
        bump_amplitude_per_level=(amp, 1e-3, 1e-3, 1e-3, 1e-3),
        bump_sigma_per_level=(sigma, 3.0, 3.0, 3.0, 3.0),
        **kw,
    )


def test_tissue_profile_gaussian_values():
    p = isolated()
    assert p.bump_amplitude_per_level[0] == 2.0
    assert ph.tissue_profile(p, 75.0) == pytest.approx(2.0, abs=1e-12)
    # one sigma away: 2 * exp(-1/2)
    assert ph.tissue_profile(p, 79.0) == pytest.approx(2.0 * math.exp(-0.5), abs=1e-12)
    assert ph.tissue_profile(p, 79.0) == pytest.approx(1.2131, abs=1e-4)


def test_tissue_profile_tail():
    p = isolated()
    y = 75.0 - 6.01 * 4.0
    assert 0.0 <= ph.tissue_profile(p, y) < 2.0 * math.exp(-18)


def test_out_of_range_position_rejected():
    p = ph.SpinePhantom()
    with pytest.raises(DomainError):
        ph.tissue_profile(p, -1.0)
    with pytest.raises(DomainError):
        ph.reaction_fy(p, p.scan_length + 0.1)


def test_reaction_zero_at_apex_and_flat():
    p = isolated()
    assert ph.reaction_fy(p, 75.0) == pytest.approx(0.0, abs=1e-12)
    assert ph.reaction_fy(p, 140.0) == pytest.approx(0.0, abs=1e-9)


def test_reaction_extrema_at_one_sigma():
    p = isolated(sigma=4.0)
    y = np.linspace(60.0, 90.0, 30001)
    fy = ph.reaction_fy(p, y)
    assert y[np.argmax(fy)] == pytest.approx(79.0, abs=1e-3)
    assert y[np.argmin(fy)] == pytest.approx(71.0, abs=1e-3)


def test_reaction_matches_finite_difference_of_profile():
    p = ph.SpinePhantom(applied_fz=12.0)
    y = np.linspace(1.0, 149.0, 200)
    h = 1e-6
    fd = (ph.tissue_profile(p, y + h) - ph.tissue_profile(p, y - h)) / (2 * h)
    np.testing.assert_allclose(ph.reaction_fy(p, y), -12.0 * fd, atol=1e-6)


def test_reaction_integral_matches_profile_change():
    p = ph.SpinePhantom(applied_fz=10.0)
    y = np.linspace(0.0, p.scan_length, 20001)
    integral = np.trapezoid(ph.reaction_fy(p, y), y)
    expected = -10.0 * (ph.tissue_profile(p, p.scan_length) - ph.tissue_profile(p, 0.0))
    # both ends sit on bump tails, so the change is small; compare on the lobe scale
    lobe = np.trapezoid(np.abs(ph.reaction_fy(p, y)), y)
    assert abs(integral - expected) <= 1e-3 * max(abs(expected), lobe)


def test_one_sign_change_per_bump():
    p = ph.SpinePhantom()
    for mu, s in zip(p.vertebra_centers, p.bump_sigma_per_level):
        y = np.linspace(mu - 3 * s, mu + 3 * s, 601)
        fy = ph.reaction_fy(p, y)
        signs = np.sign(fy[np.abs(fy) > 1e-9])
        assert np.count_nonzero(np.diff(signs)) == 1


def test_generate_scan_is_deterministic():
    p = ph.SpinePhantom(noise_std_force=0.3, us_noise_std=0.1, seed=11)
    a, b = ph.generate_scan(p), ph.generate_scan(p)
    for name in ("timestamps", "positions", "fy", "fz", "us_prob", "ground_truth"):
        assert np.array_equal(getattr(a, name), getattr(b, name))


def test_noise_free_scan_equals_model():
    p = ph.SpinePhantom()
    r = ph.generate_scan(p)
    assert np.array_equal(r.fy, ph.reaction_fy(p, r.positions))
    assert np.all(r.fz == p.applied_fz)


def test_doubling_fz_doubles_fy():
    a = ph.generate_scan(ph.SpinePhantom(applied_fz=5.0))
    b = ph.generate_scan(ph.SpinePhantom(applied_fz=10.0))
    np.testing.assert_allclose(b.fy, 2 * a.fy, rtol=1e-12, atol=1e-15)


def test_scan_record_invariants():
    p = ph.SpinePhantom(noise_std_force=0.2, us_noise_std=0.3, seed=2)
    r = ph.generate_scan(p)
    assert len(r) == int(p.scan_length / p.robot_speed * p.sample_rate) + 1
    np.testing.assert_allclose(r.positions, p.robot_speed * r.timestamps)
    assert np.all(np.diff(r.positions) >= 0)
    assert r.us_prob.min() >= 0.0 and r.us_prob.max() <= 1.0


def test_ground_truth_has_five_ordered_runs():
    r = ph.generate_scan(ph.SpinePhantom())
    lab = r.ground_truth
    runs = [int(lab[i]) for i in range(len(lab)) if lab[i] != GAP and (i == 0 or lab[i - 1] != lab[i])]
    assert runs == [1, 2, 3, 4, 5]


@settings(max_examples=25, deadline=None)
@given(seed=st.integers(0, 2**31 - 2))
def test_cohort_phantoms_ground_truth_runs(seed):
    cfg = ph.CohortConfig(n_train=1, n_val=0, n_test=0, seed=seed)
    (entry,) = ph.make_cohort(cfg)
    lab = ph.generate_scan(entry.phantom).ground_truth
    starts = [int(lab[i]) for i in range(len(lab)) if lab[i] != GAP and (i == 0 or lab[i - 1] != lab[i])]
    assert starts == [1, 2, 3, 4, 5]


def test_dropped_us_levels_stay_below_noise_band():
    base = dict(us_noise_std=0.05, corruption=ph.CorruptionSpec(dropped_us_levels={2}))
    below = total = 0
    for seed in range(200):
        p = ph.SpinePhantom(seed=seed, **base)
        r = ph.generate_scan(p)
        mu, s = p.vertebra_centers[2], p.us_peak_sigma_per_level[2]
        window = r.us_prob[np.abs(r.positions - mu) <= 3 * s]
        total += window.size
        below += int(np.sum(window < 3 * p.us_noise_std))
    assert below / total > 0.99


def test_force_attenuation_scales_single_bump():
    clean = ph.SpinePhantom()
    corrupt = ph.SpinePhantom(corruption=ph.CorruptionSpec(attenuated_force_levels={1: 0.25}))
    a, b = ph.generate_scan(clean), ph.generate_scan(corrupt)
    mu = clean.vertebra_centers[1]
    near = np.abs(a.positions - mu) < 8
    np.testing.assert_allclose(b.fy[near], 0.25 * a.fy[near], rtol=0.02, atol=1e-6)


@pytest.mark.parametrize("kwargs", [
    dict(vertebra_centers=(10, 5, 30, 40, 50)),
    dict(vertebra_centers=(0, 20, 30, 40, 50)),
    dict(vertebra_centers=(10, 20, 30, 40)),
    dict(bump_sigma_per_level=(0, 1, 1, 1, 1)),
    dict(sample_rate=0),
    dict(robot_speed=-1),
    dict(drift_params=ph.DriftParams(amplitude=1, frequency=0.06)),
])
def test_invalid_phantoms(kwargs):
    with pytest.raises(ParameterError):
        ph.SpinePhantom(**kwargs)


def test_corruption_validation():
    with pytest.raises(ParameterError):
        ph.CorruptionSpec(dropped_us_levels={5})
    with pytest.raises(ParameterError):
        ph.CorruptionSpec(attenuated_force_levels={0: 1.5})


def test_phantom_json_round_trip():
    p = ph.SpinePhantom(
        corruption=ph.CorruptionSpec(
            dropped_us_levels={1, 3},
            attenuated_force_levels={0: 0.2},
            motion_burst=ph.MotionBurst(60.0, 3.0, 2.0),
        ),
        drift_params=ph.DriftParams(1.0, 0.02, 0.3, 0.1),
        seed=5,
    )
    q = ph.SpinePhantom.from_dict(p.to_dict())
    assert q == p


def _digest(root):
    out = {}
    for f in sorted(root.rglob("*")):
        if f.is_file():
            out[str(f.relative_to(root))] = hashlib.sha256(f.read_bytes()).hexdigest()
    return out


def test_generate_dataset_counts_and_files(tmp_path):
    entries = ph.make_cohort(ph.CohortConfig(n_train=27, n_val=7, n_test=0))
    manifest = ph.generate_dataset(entries, tmp_path)
    assert len(manifest["entries"]) == 34
    splits = [e["split"] for e in manifest["entries"]]
    assert splits.count("train") == 27 and splits.count("val") == 7
    e = manifest["entries"][0]
    rec = ph.read_scan(tmp_path / e["scan"], tmp_path / e["labels"])
    direct = ph.generate_scan(entries[0].phantom)
    assert np.array_equal(rec.fy, direct.fy)
    assert np.array_equal(rec.ground_truth, direct.ground_truth)
    header = (tmp_path / e["scan"]).read_text().splitlines()[0]
    assert header == "t_s,pos_mm,fy_n,fz_n,us_prob"
    assert (tmp_path / e["labels"]).read_text().splitlines()[0] == "pos_mm,level"
    loaded = ph.SpinePhantom.from_dict(ph.read_json(tmp_path / e["phantom"]))
    assert loaded == entries[0].phantom


def test_generate_dataset_empty(tmp_path):
    out = tmp_path / "empty"
    assert ph.generate_dataset([], out)["entries"] == []
    assert not out.exists()


def test_generate_dataset_byte_identical(tmp_path):
    entries = ph.make_cohort(ph.CohortConfig(n_train=3, n_val=1, n_test=1, seed=4))
    ph.generate_dataset(entries, tmp_path / "a")
    ph.generate_dataset(ph.make_cohort(ph.CohortConfig(n_train=3, n_val=1, n_test=1, seed=4)), tmp_path / "b")
    da, db = _digest(tmp_path / "a"), _digest(tmp_path / "b")
    assert da == db and len(da) == 3 * 5 + 1


def test_generate_dataset_reports_unwritable_path(tmp_path):
    blocker = tmp_path / "file"
    blocker.write_text("x")
    with pytest.raises(ph.DataError, match="file"):
        ph.generate_dataset([ph.SpinePhantom()], blocker / "sub")


def test_malformed_scan_csv_names_line(tmp_path):
    r = ph.generate_scan(ph.SpinePhantom())
    scan, labels = tmp_path / "s.csv", tmp_path / "l.csv"
    ph.write_scan_csv(r, scan)
    ph.write_labels_csv(r.positions, r.ground_truth, labels)
    lines = scan.read_text().splitlines()
    lines[4] = "0.1,abc,0,0,0"
    scan.write_text("\n".join(lines) + "\n")
    with pytest.raises(ph.DataError, match=r"s\.csv:5"):
        ph.read_scan(scan, labels)
