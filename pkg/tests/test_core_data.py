import struct

import numpy as np
import pytest
from hypothesis import given, settings
from hypothesis import strategies as st
from hypothesis.extra import numpy as hnp

from costal.core_data import (
    FLAG_MASKS,
    MAGIC,
    DatasetManifest,
    HeaderError,
    HeatmapStack,
    InvariantError,
    ManifestEntry,
    ManifestError,
    PayloadError,
    ProbabilityRangeError,
    Stack,
    decode_stack,
    encode_stack,
    load_dataset,
    load_heatmap,
    load_stack,
    read_manifest,
    save_dataset,
    save_heatmap,
    save_stack,
    write_manifest,
)


def test_round_trip_field_by_field(tmp_path, stack_factory):
    s = stack_factory("abc", split="seed_trainval")
    save_stack(s, tmp_path / "abc.alst")
    back = load_stack(tmp_path / "abc.alst", split="seed_trainval", gt_label_time=12.5)
    assert back == s
    assert back.frames.dtype == np.dtype("<f4")
    assert np.array_equal(back.gt_masks, s.gt_masks)


def test_id_defaults_to_file_stem(tmp_path, stack_factory):
    save_stack(stack_factory("ignored"), tmp_path / "scan_07.alst")
    assert load_stack(tmp_path / "scan_07.alst").id == "scan_07"


def test_two_saves_identical_bytes(tmp_path, stack_factory):
    s = stack_factory()
    save_stack(s, tmp_path / "a.alst")
    save_stack(s, tmp_path / "b.alst")
    assert (tmp_path / "a.alst").read_bytes() == (tmp_path / "b.alst").read_bytes()


def test_corrupt_magic_is_header_error(tmp_path, stack_factory):
    data = bytearray(encode_stack(stack_factory()))
    data[0:4] = b"XXXX"
    with pytest.raises(HeaderError):
        decode_stack(bytes(data), "x")


def test_bad_version_and_unknown_flags(stack_factory):
    data = bytearray(encode_stack(stack_factory()))
    bad_version = data[:4] + struct.pack("<H", 2) + data[6:]
    with pytest.raises(HeaderError):
        decode_stack(bytes(bad_version), "x")
    bad_flags = data[:6] + struct.pack("<H", 0x80) + data[8:]
    with pytest.raises(HeaderError):
        decode_stack(bytes(bad_flags), "x")


def test_truncated_payload_is_payload_error(stack_factory):
    data = encode_stack(stack_factory())
    with pytest.raises(PayloadError):
        decode_stack(data[:-1], "x")
    with pytest.raises(HeaderError):
        decode_stack(data[:10], "x")


def test_zero_masks_load(tmp_path):
    s = Stack("z", np.zeros((3, 8, 8)), np.zeros((3, 8, 8), np.uint8))
    save_stack(s, tmp_path / "z.alst")
    back = load_stack(tmp_path / "z.alst")
    assert back.n_frames == 3 and back.gt_masks.sum() == 0


def test_minimal_stack_payload_is_one_float():
    data = encode_stack(Stack("m", np.full((1, 1, 1), 0.5)))
    header = struct.Struct("<4sHHIII")
    assert header.unpack_from(data) == (MAGIC, 1, 0, 1, 1, 1)
    assert len(data) == header.size + 4
    assert struct.unpack("<f", data[header.size:]) == (0.5,)


def test_mask_flag_and_layout():
    s = Stack("m", np.zeros((2, 1, 3)), np.array([[[1, 0, 1]], [[0, 0, 1]]], np.uint8))
    data = encode_stack(s)
    assert struct.unpack_from("<H", data, 6)[0] == FLAG_MASKS
    assert data[-6:] == bytes([1, 0, 1, 0, 0, 1])


def test_mask_length_mismatch_refuses_to_write(tmp_path):
    s = Stack("bad", np.zeros((3, 4, 4)), np.zeros((2, 4, 4), np.uint8))
    with pytest.raises(InvariantError):
        save_stack(s, tmp_path / "bad.alst")
    assert not (tmp_path / "bad.alst").exists()


@pytest.mark.parametrize(
    "kwargs",
    [
        dict(frames=np.zeros((0, 4, 4))),
        dict(frames=np.zeros((4, 4))),
        dict(frames=np.full((1, 2, 2), np.nan)),
        dict(frames=np.zeros((1, 2, 2)), gt_masks=np.full((1, 2, 2), 2, np.uint8)),
        dict(frames=np.zeros((1, 2, 2)), gt_label_time=0.0),
        dict(frames=np.zeros((1, 2, 2)), split="train"),
    ],
)
def test_invariant_violations(kwargs):
    with pytest.raises(InvariantError):
        Stack("x", **kwargs).validate()


def test_probability_payload_range_checked(tmp_path):
    ok = HeatmapStack("h", np.full((1, 2, 2), 0.25))
    save_heatmap(ok, tmp_path / "h.alst")
    assert load_heatmap(tmp_path / "h.alst") == ok
    bad = HeatmapStack("h", np.full((1, 2, 2), 1.5))
    with pytest.raises(ProbabilityRangeError):
        save_heatmap(bad, tmp_path / "bad.alst")
    # a raw container carrying the flag but out-of-range values fails at load
    save_heatmap(bad, tmp_path / "raw.alst", probabilities=False)
    data = bytearray((tmp_path / "raw.alst").read_bytes())
    data[6:8] = struct.pack("<H", 2)
    with pytest.raises(ProbabilityRangeError):
        decode_stack(bytes(data), "raw")


@settings(max_examples=60, deadline=None)
@given(
    hnp.arrays(np.float32, hnp.array_shapes(min_dims=3, max_dims=3, max_side=6),
               elements=st.floats(width=32, allow_nan=False, allow_infinity=False)),
    st.booleans(),
)
def test_round_trip_bit_exact(frames, with_masks):
    masks = (np.abs(frames) > 1).astype(np.uint8) if with_masks else None
    s = Stack("p", frames, masks)
    back = decode_stack(encode_stack(s), "p")
    assert back.frames.tobytes() == s.frames.tobytes()
    assert back == s


def test_manifest_round_trip(tmp_path, stack_factory):
    stacks = [stack_factory(f"s{i}", split=sp, seed=i) for i, sp in enumerate(["seed_trainval", "pool", "pool_test"])]
    stacks[1] = Stack(stacks[1].id, stacks[1].frames, stacks[1].gt_masks, None, "pool")
    path = save_dataset(stacks, tmp_path)
    text = path.read_text().splitlines()
    assert text[0] == "stack_id,path,split,gt_label_time"
    assert text[2] == "s1,stacks/s1.alst,pool,"
    loaded = load_dataset(path)
    assert loaded == stacks
    assert [s.id for s in load_dataset(path, ["pool_test"])] == ["s2"]


def test_manifest_errors(tmp_path):
    with pytest.raises(ManifestError):
        DatasetManifest([ManifestEntry("a", "a.alst", "pool"), ManifestEntry("a", "b.alst", "pool")])
    with pytest.raises(ManifestError):
        DatasetManifest([ManifestEntry("a", "a.alst", "holdout")])
    m = DatasetManifest([ManifestEntry("a", "missing.alst", "pool", 3.0)])
    write_manifest(m, tmp_path / "m.csv")
    with pytest.raises(ManifestError):
        read_manifest(tmp_path / "m.csv")
    assert read_manifest(tmp_path / "m.csv", check_files=False).entries[0].gt_label_time == 3.0
    (tmp_path / "bad.csv").write_text("id,path\n")
    with pytest.raises(ManifestError):
        read_manifest(tmp_path / "bad.csv")


def test_without_labels_strips_masks_and_time(stack_factory):
    s = stack_factory()
    u = s.without_labels()
    assert u.gt_masks is None and u.gt_label_time is None
    assert u.frames.tobytes() == s.frames.tobytes()
