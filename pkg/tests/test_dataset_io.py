import io

import numpy as np
import pytest
from hypothesis import given, settings, strategies as st
from hypothesis.extra import numpy as hnp

from dslstm import audio, dataset_io
from dslstm.audio import AudioClip
from dslstm.dataset_io import FeatureRecord, FormatError, ManifestEntry, ManifestError
from dslstm.experiments import mean_logmel
from dslstm.synth import DEFAULT_SIGNATURES, ClassSignature, SyntheticSpec, generate_synthetic


def write_csv(path, rows):
    path.write_text("id,path,label,group\n" + "".join(",".join(r) + "\n" for r in rows))
    return path


# ---------------------------------------------------------------- manifest


def test_manifest_round_trip(tmp_path):
    (tmp_path / "a.wav").write_bytes(b"")
    entries = [ManifestEntry("a", str(tmp_path / "a.wav"), "sad", "s1")]
    dataset_io.write_manifest(tmp_path / "m.csv", entries)
    assert "a,a.wav,sad,s1" in (tmp_path / "m.csv").read_text()
    assert dataset_io.load_manifest(tmp_path / "m.csv") == entries


def test_empty_manifest_warns(tmp_path, caplog):
    (tmp_path / "m.csv").write_text("")
    assert dataset_io.load_manifest(tmp_path / "m.csv") == []
    assert "empty" in caplog.text


def test_unknown_label_names_row(tmp_path):
    p = write_csv(tmp_path / "m.csv", [["a", "a.wav", "happy", ""], ["b", "b.wav", "fear", ""]])
    with pytest.raises(ManifestError, match="row 3.*fear"):
        dataset_io.load_manifest(p, check_files=False)


def test_duplicate_id(tmp_path):
    p = write_csv(tmp_path / "m.csv", [["a", "a.wav", "happy", ""], ["a", "b.wav", "sad", ""]])
    with pytest.raises(ManifestError, match="duplicate"):
        dataset_io.load_manifest(p, check_files=False)


def test_missing_wav(tmp_path):
    p = write_csv(tmp_path / "m.csv", [["a", "nope.wav", "happy", ""]])
    with pytest.raises(ManifestError, match="not found"):
        dataset_io.load_manifest(p)


# ---------------------------------------------------------------- wav


def test_wav_round_trip(tmp_path):
    x = 0.5 * np.sin(np.linspace(0, 100, 4000))
    dataset_io.write_wav(tmp_path / "x.wav", AudioClip(x, 8000))
    c = dataset_io.read_wav(tmp_path / "x.wav")
    assert c.sample_rate == 8000
    np.testing.assert_allclose(c.samples, x, atol=1 / 32767)


def test_stereo_is_averaged(tmp_path):
    from scipy.io import wavfile

    data = np.stack([np.full(100, 1000, np.int16), np.full(100, 3000, np.int16)], axis=1)
    wavfile.write(tmp_path / "s.wav", 16000, data)
    np.testing.assert_allclose(dataset_io.read_wav(tmp_path / "s.wav").samples, 2000 / 32768)


# ---------------------------------------------------------------- archive


def record(uid="u", label=2, rng=None):
    rng = rng or np.random.default_rng(0)
    return FeatureRecord(
        uid, label,
        rng.standard_normal((7, 39)).astype(np.float32),
        rng.standard_normal((64, 9)).astype(np.float32),
        rng.standard_normal((128, 4)).astype(np.float32),
    )


def test_archive_round_trip(tmp_path):
    recs = [record("a"), record("b", 0, np.random.default_rng(1))]
    dataset_io.write_features(tmp_path / "f.dsl", recs)
    assert dataset_io.read_features(tmp_path / "f.dsl") == recs


def test_empty_archive(tmp_path):
    dataset_io.write_features(tmp_path / "f.dsl", [])
    assert dataset_io.read_features(tmp_path / "f.dsl") == []


def test_archive_layout_header(tmp_path):
    dataset_io.write_features(tmp_path / "f.dsl", [record()])
    raw = (tmp_path / "f.dsl").read_bytes()
    assert raw[:4] == b"DSL1"
    assert int.from_bytes(raw[4:8], "little") == 1
    assert int.from_bytes(raw[8:12], "little") == 1


@pytest.mark.parametrize("damage", ["magic", "version", "truncate", "trailing"])
def test_corrupt_archive_rejected(tmp_path, damage):
    dataset_io.write_features(tmp_path / "f.dsl", [record()])
    raw = bytearray((tmp_path / "f.dsl").read_bytes())
    if damage == "magic":
        raw[:4] = b"XXXX"
    elif damage == "version":
        raw[4] = 9
    elif damage == "truncate":
        raw = raw[:-5]
    else:
        raw += b"\0"
    (tmp_path / "f.dsl").write_bytes(bytes(raw))
    with pytest.raises(FormatError):
        dataset_io.read_features(tmp_path / "f.dsl")


@settings(max_examples=30, deadline=None)
@given(hnp.arrays(np.float32, hnp.array_shapes(min_dims=0, max_dims=3, max_side=5)))
def test_tensor_round_trip_bit_exact(arr):
    buf = io.BytesIO()
    dataset_io.write_tensor(buf, arr)
    buf.seek(0)
    out = dataset_io.read_tensor(buf)
    assert out.shape == arr.shape
    assert out.tobytes() == arr.astype("<f4").tobytes()


def test_checkpoint_round_trip(tmp_path):
    t = {"param/b": np.ones(3, np.float32), "buffer/a": np.zeros((2, 2), np.float32)}
    dataset_io.write_checkpoint(tmp_path / "c.dslp", {"x": 1}, t)
    cfg, back = dataset_io.read_checkpoint(tmp_path / "c.dslp")
    assert cfg == {"x": 1} and set(back) == set(t)


# ---------------------------------------------------------------- synthetic corpus


def test_synthetic_is_deterministic_and_balanced():
    spec = SyntheticSpec(per_class=3, duration=(0.2, 0.5), seed=5)
    a, b = generate_synthetic(spec), generate_synthetic(spec)
    assert all(np.array_equal(x.clip.samples, y.clip.samples) for x, y in zip(a, b))
    assert [u.label for u in a].count("sad") == 3
    assert len({len(u.clip) for u in a}) > 1


def test_synthetic_peak_in_band():
    for u in generate_synthetic(SyntheticSpec(per_class=2, duration=(0.5, 0.8), seed=1)):
        x = u.clip.samples
        spec = np.abs(np.fft.rfft(x))
        peak = np.fft.rfftfreq(x.size, 1 / u.clip.sample_rate)[spec.argmax()]
        lo, hi = DEFAULT_SIGNATURES[u.label].band
        assert lo - 10 <= peak <= hi + 10


def test_synthetic_spec_validation():
    with pytest.raises(ValueError):
        SyntheticSpec(duration=(2.0, 1.0))
    same = ClassSignature((100.0, 200.0), 1.0)
    with pytest.raises(ValueError):
        SyntheticSpec(signatures={k: same for k in DEFAULT_SIGNATURES})


def test_mean_logmel_vector(tiny_records):
    v = mean_logmel(tiny_records[0])
    assert v.shape == (64 + 128,)
