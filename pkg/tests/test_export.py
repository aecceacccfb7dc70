import math

import numpy as np
import pytest
from hypothesis import given, settings
from hypothesis import strategies as st

from lstm_postfilter.export import (
    export_trajectory, mfcc_to_envelope, read_matrix_csv, write_matrix_csv, write_trajectory_csv,
)
from lstm_postfilter.features_io import Utterance
from lstm_postfilter.synthdata import DistortionSpec, synth_corpus


def mk(mfcc, uid="u", shift=5.0):
    mfcc = np.asarray(mfcc, dtype=float)
    return Utterance(uid, np.zeros(len(mfcc)), np.zeros(len(mfcc)), mfcc, shift)


def test_trajectory_identical_columns():
    u = mk(np.random.default_rng(0).normal(size=(6, 8)))
    table = export_trajectory(u, u, u, 5)
    assert np.array_equal(table.natural, table.hts) and np.array_equal(table.hts, table.postfiltered)
    assert len(table) == 6


def test_trajectory_extracts_coefficient():
    p = synth_corpus(3, (40, 40), 8, DistortionSpec(seed=1)).pairs[0]
    post = p.source.with_mfcc(p.source.mfcc * 0.5)
    table = export_trajectory(p.target, p.source, post, 5)
    for t in range(len(p.target)):
        assert table.time_ms[t] == t * 5.0
        assert table.natural[t] == p.target.mfcc[t, 5]
        assert table.hts[t] == p.source.mfcc[t, 5]
        assert table.postfiltered[t] == post.mfcc[t, 5]


def test_trajectory_errors():
    u = mk(np.zeros((3, 4)))
    with pytest.raises(IndexError):
        export_trajectory(u, u, u, 4)
    with pytest.raises(ValueError):
        export_trajectory(u, mk(np.zeros((2, 4))), u, 1)


def test_envelope_zero():
    assert not mfcc_to_envelope(mk(np.zeros((3, 5))), 16).any()


def test_envelope_single_cosine():
    c = np.zeros((1, 6))
    c[0, 1] = 1.0
    env = mfcc_to_envelope(mk(c), 64)[0]
    assert env[0] == pytest.approx(2.0, abs=1e-15)
    assert env[-1] == pytest.approx(-2.0, abs=1e-15)
    for k in (0, 10, 31, 63):
        assert env[k] == pytest.approx(2 * math.cos(math.pi * k / 63), abs=1e-14)


def test_envelope_without_c0():
    c = np.zeros((1, 3))
    c[0, 0] = 1.0  # read as c_1
    env = mfcc_to_envelope(mk(c), 8, includes_c0=False)[0]
    assert env[0] == pytest.approx(2.0) and env[-1] == pytest.approx(-2.0)


def test_envelope_rows_equal_for_equal_frames():
    env = mfcc_to_envelope(mk([[0.3, 0.1, -0.2]] * 2), 8)
    assert np.array_equal(env[0], env[1])


def test_envelope_needs_enough_bins():
    with pytest.raises(ValueError):
        mfcc_to_envelope(mk(np.zeros((1, 5))), 4)


@given(st.floats(-10, 10), st.integers(0, 1000))
@settings(max_examples=50, deadline=None)
def test_envelope_linear(a, seed):
    c = np.random.default_rng(seed).normal(size=(2, 6))
    env = mfcc_to_envelope(mk(c), 32)
    assert np.allclose(mfcc_to_envelope(mk(a * c), 32), a * env, rtol=1e-12, atol=1e-12)


def test_csv_round_trip(tmp_path):
    env = mfcc_to_envelope(mk(np.random.default_rng(3).normal(size=(4, 8))), 16)
    write_matrix_csv(env, tmp_path / "env.csv")
    header = (tmp_path / "env.csv").read_text().splitlines()[0]
    assert header.split(",")[0] == "bin_0" and len(header.split(",")) == 16
    back = read_matrix_csv(tmp_path / "env.csv")
    assert np.allclose(back, env, rtol=1e-9, atol=1e-12)

    u = mk(np.random.default_rng(4).normal(size=(5, 8)))
    write_trajectory_csv(export_trajectory(u, u, u, 5), tmp_path / "t.csv")
    rows = read_matrix_csv(tmp_path / "t.csv")
    assert rows.shape == (5, 4)
    assert np.allclose(rows[:, 1], u.mfcc[:, 5], rtol=1e-9, atol=1e-12)
