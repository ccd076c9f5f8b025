"""Phase parameters, manifold construction, and scalar edits."""
import numpy as np
import pytest
import torch
from hypothesis import given, settings, strategies as st

from phasectl.errors import EditInvalid, FormatError
from phasectl.manifold import (K_CHANNELS, MANIFOLD_COLS, EditSpec, PartEdit,
                               PhaseParams, PhaseSequence, apply_edit,
                               build_manifold, edit_mask, manifold_torch,
                               part_columns)
from phasectl.motion import PARTS


def sample_values(seed=0):
    rng = np.random.default_rng(seed)
    vals = np.zeros((len(PARTS), K_CHANNELS, 4))
    vals[:, :, 0] = rng.uniform(0.1, 2.0, vals.shape[:2])   # A
    vals[:, :, 1] = rng.uniform(0.5, 8.0, vals.shape[:2])   # F
    vals[:, :, 2] = rng.uniform(0.0, 1.0, vals.shape[:2])   # S
    vals[:, :, 3] = rng.uniform(-1.0, 1.0, vals.shape[:2])  # B
    return vals


# -- PhaseParams validation ---------------------------------------------------

def test_params_shape_enforced():
    with pytest.raises(FormatError):
        PhaseParams(np.zeros((4, 2, 4)))
    with pytest.raises(FormatError):
        PhaseParams(np.zeros((5, 2, 3)))


def test_params_value_domains():
    bad = sample_values()
    bad[0, 0, 0] = -0.1
    with pytest.raises(FormatError):
        PhaseParams(bad)
    bad = sample_values()
    bad[1, 1, 1] = 0.0
    with pytest.raises(FormatError):
        PhaseParams(bad)
    bad = sample_values()
    bad[2, 0, 2] = 1.0
    with pytest.raises(FormatError):
        PhaseParams(bad)
    bad = sample_values()
    bad[3, 1, 3] = np.nan
    with pytest.raises(FormatError):
        PhaseParams(bad)


def test_params_dict_roundtrip(tmp_path):
    p = PhaseParams(sample_values(3))
    q = PhaseParams.from_dict(p.to_dict())
    assert np.array_equal(p.values, q.values)
    path = tmp_path / "params.json"
    p.save(path)
    assert np.array_equal(PhaseParams.load(path).values, p.values)


def test_params_part_lookup():
    p = PhaseParams(sample_values(1))
    assert np.array_equal(p.part("trunk"), p.values[PARTS.index("trunk")])


# -- manifold construction ----------------------------------------------------

def test_manifold_matches_closed_form():
    vals = sample_values(7)
    T = 40
    seq = build_manifold(PhaseParams(vals), T)
    assert seq.values.shape == (T, MANIFOLD_COLS)
    tau = np.arange(T) / (T - 1)
    for i, part in enumerate(PARTS):
        cols = part_columns(part)
        for k in range(K_CHANNELS):
            A, F, S, _ = vals[i, k]
            phi = 2 * np.pi * (F * tau + S)
            np.testing.assert_allclose(seq.values[:, cols[2 * k]],
                                       A * np.cos(phi), atol=1e-12)
            np.testing.assert_allclose(seq.values[:, cols[2 * k + 1]],
                                       A * np.sin(phi), atol=1e-12)


def test_manifold_excludes_offset():
    vals = sample_values(2)
    other = vals.copy()
    other[:, :, 3] += 5.0
    a = build_manifold(PhaseParams(vals), 16).values
    b = build_manifold(PhaseParams(other), 16).values
    assert np.array_equal(a, b)


def test_manifold_needs_two_frames():
    with pytest.raises(FormatError):
        build_manifold(PhaseParams(sample_values()), 1)


def test_manifold_torch_batched_matches_single():
    vals = torch.tensor(np.stack([sample_values(0), sample_values(1)]))
    batch = manifold_torch(vals, 12)
    for i in range(2):
        single = manifold_torch(vals[i], 12)
        assert torch.equal(batch[i], single)


def test_manifold_columns_per_channel_norm():
    # every (cos, sin) pair traces a circle of radius A
    vals = sample_values(9)
    seq = build_manifold(PhaseParams(vals), 50).values
    for i in range(len(PARTS)):
        for k in range(K_CHANNELS):
            c = seq[:, i * 4 + 2 * k]
            s = seq[:, i * 4 + 2 * k + 1]
            np.testing.assert_allclose(np.hypot(c, s), vals[i, k, 0],
                                       atol=1e-12)


def test_phase_sequence_validation_and_csv(tmp_path):
    with pytest.raises(FormatError):
        PhaseSequence(np.zeros((8, MANIFOLD_COLS + 1)))
    seq = build_manifold(PhaseParams(sample_values()), 8)
    path = tmp_path / "seq.csv"
    seq.to_csv(path)
    header = path.read_text().splitlines()[0].split(",")
    assert header == PhaseSequence.column_names()
    back = np.loadtxt(path, delimiter=",", skiprows=1)
    np.testing.assert_allclose(back, seq.values, rtol=1e-6)


# -- edits --------------------------------------------------------------------

def test_edit_spec_validation():
    with pytest.raises(EditInvalid):
        EditSpec(parts={"tail": PartEdit()})
    with pytest.raises(EditInvalid):
        EditSpec.single("trunk", amp_scale=0.0)
    with pytest.raises(EditInvalid):
        EditSpec.single("trunk", freq_scale=-2.0)
    with pytest.raises(EditInvalid):
        EditSpec.single("trunk", shift_delta=float("inf"))


def test_edit_spec_identity_detection():
    assert EditSpec().is_identity()
    assert EditSpec(parts={"trunk": PartEdit()}).is_identity()
    spec = EditSpec.single("left_up", amp_scale=2.0)
    assert not spec.is_identity()
    assert spec.edited_parts == ("left_up",)


def test_edit_spec_dict_strictness():
    with pytest.raises(EditInvalid):
        EditSpec.from_dict({"amp_scale": 2.0})
    with pytest.raises(EditInvalid):
        EditSpec.from_dict({"parts": []})
    with pytest.raises(EditInvalid):
        EditSpec.from_dict({"parts": {"trunk": 2.0}})
    with pytest.raises(EditInvalid):
        EditSpec.from_dict({"parts": {"trunk": {"amplitude": 2.0}}})
    with pytest.raises(EditInvalid):
        EditSpec.from_dict({"parts": {"paw": {"amp_scale": 2.0}}})


def test_edit_spec_dict_roundtrip():
    spec = EditSpec(parts={
        "right_up": PartEdit(amp_scale=1.5),
        "trunk": PartEdit(freq_scale=2.0, shift_delta=-0.25),
        "left_up": PartEdit(),  # identity rows vanish from the dict
    })
    d = spec.to_dict()
    assert set(d) == {"parts"}
    assert set(d["parts"]) == {"right_up", "trunk"}
    back = EditSpec.from_dict(d)
    assert back.parts["right_up"] == PartEdit(amp_scale=1.5)
    assert back.parts["trunk"] == PartEdit(freq_scale=2.0, shift_delta=-0.25)


def test_apply_edit_scales_and_wraps():
    p = PhaseParams(sample_values(5))
    spec = EditSpec.single("right_up", amp_scale=1.5, freq_scale=2.0,
                           shift_delta=0.75)
    q = apply_edit(p, spec)
    i = PARTS.index("right_up")
    np.testing.assert_allclose(q.values[i, :, 0], 1.5 * p.values[i, :, 0])
    np.testing.assert_allclose(q.values[i, :, 1], 2.0 * p.values[i, :, 1])
    np.testing.assert_allclose(
        q.values[i, :, 2], (p.values[i, :, 2] + 0.75) % 1.0)
    np.testing.assert_allclose(q.values[i, :, 3], p.values[i, :, 3])


def test_apply_edit_leaves_other_parts_bitwise():
    p = PhaseParams(sample_values(6))
    q = apply_edit(p, EditSpec.single("left_low", amp_scale=0.5))
    for j, part in enumerate(PARTS):
        if part == "left_low":
            continue
        assert np.array_equal(q.values[j], p.values[j])
    # and the input object is untouched
    assert np.array_equal(p.values, sample_values(6))


def test_apply_edit_identity_is_noop():
    p = PhaseParams(sample_values(8))
    q = apply_edit(p, EditSpec())
    assert np.array_equal(p.values, q.values)


@given(st.sampled_from(PARTS), st.floats(0.25, 2.0), st.floats(0.5, 2.0),
       st.floats(-0.5, 0.5))
@settings(deadline=None, max_examples=30)
def test_apply_edit_composes_with_inverse(part, a, f, s):
    p = PhaseParams(sample_values(11))
    fwd = EditSpec.single(part, amp_scale=a, freq_scale=f, shift_delta=s)
    inv = EditSpec.single(part, amp_scale=1 / a, freq_scale=1 / f,
                          shift_delta=-s)
    q = apply_edit(apply_edit(p, fwd), inv)
    np.testing.assert_allclose(q.values[..., [0, 1]], p.values[..., [0, 1]],
                               rtol=1e-12)
    ds = (q.values[..., 2] - p.values[..., 2]) % 1.0
    assert np.all((ds < 1e-9) | (ds > 1 - 1e-9))


def test_edit_mask_marks_exactly_edited_columns():
    spec = EditSpec(parts={"right_up": PartEdit(amp_scale=2.0),
                           "trunk": PartEdit(shift_delta=0.1)})
    m = edit_mask(spec, 6)
    assert m.shape == (6, MANIFOLD_COLS)
    hot = set(np.flatnonzero(m[0]))
    expect = set(part_columns("right_up")) | set(part_columns("trunk"))
    assert hot == expect
    assert np.all(m[:, sorted(hot)] == 1.0)


def test_part_columns_partition_manifold():
    seen = np.concatenate([part_columns(p) for p in PARTS])
    assert sorted(seen.tolist()) == list(range(MANIFOLD_COLS))
