import numpy as np
import pytest

from vphm.artifact import ArtifactError, load_artifact, save_artifact


def test_round_trip_bit_exact(tmp_path):
    rng = np.random.default_rng(0)
    arrays = {
        "a": rng.normal(size=(3, 4)),
        "b/nested": rng.normal(size=7),
        "scalarish": np.array([np.pi]),
        "special": np.array([np.nan, np.inf, -np.inf, -0.0]),
    }
    meta = {"config": {"epochs": 130, "rate": 0.1}, "tag": "x"}
    path = tmp_path / "m.vphm"
    save_artifact(path, "cnn", meta, arrays)

    kind, got_meta, got = load_artifact(path)
    assert kind == "cnn"
    assert got_meta == meta
    assert set(got) == set(arrays)
    for name in arrays:
        assert np.asarray(arrays[name]).tobytes() == got[name].tobytes()


def test_magic_bytes_lead_the_file(tmp_path):
    path = tmp_path / "m.vphm"
    save_artifact(path, "qlr", {}, {"w": np.zeros(2)})
    assert path.read_bytes().startswith(b"VPHM1")


def test_save_is_deterministic(tmp_path):
    arrays = {"w": np.arange(5.0), "b": np.array([1.0])}
    save_artifact(tmp_path / "a", "qlr", {"k": 1}, arrays)
    save_artifact(tmp_path / "b", "qlr", {"k": 1}, arrays)
    assert (tmp_path / "a").read_bytes() == (tmp_path / "b").read_bytes()


def test_bad_magic_rejected(tmp_path):
    path = tmp_path / "bad"
    path.write_bytes(b"NOPE!" + b"\x00" * 16)
    with pytest.raises(ArtifactError):
        load_artifact(path)


def test_truncated_payload_rejected(tmp_path):
    path = tmp_path / "m.vphm"
    save_artifact(path, "cnn", {}, {"w": np.zeros(10)})
    blob = path.read_bytes()
    path.write_bytes(blob[:-8])
    with pytest.raises(ArtifactError):
        load_artifact(path)


def test_trailing_bytes_rejected(tmp_path):
    path = tmp_path / "m.vphm"
    save_artifact(path, "cnn", {}, {"w": np.zeros(3)})
    path.write_bytes(path.read_bytes() + b"junk")
    with pytest.raises(ArtifactError):
        load_artifact(path)
