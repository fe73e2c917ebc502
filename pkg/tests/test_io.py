import numpy as np
import pytest

from iman.config import dump_flat, parse_flat, parse_value
from iman.dataset_io import META_HEADER, decode_sample, encode_sample, read_dataset, write_dataset
from iman.exceptions import ConfigurationError
from iman.missingness import build_table, mask_cohort
from iman.synthetic import SyntheticSpec, gen_synthetic


def test_sample_blob_round_trip(rng):
    arrays = [rng.normal(size=4), rng.normal(size=19), rng.normal(size=(1, 3, 2))]
    raw = encode_sample(arrays)
    assert raw[:4] == b"IMSM"
    for a, b in zip(arrays, decode_sample(raw)):
        assert a.tobytes() == b.tobytes()


def test_sample_blob_rejects_garbage():
    with pytest.raises(ConfigurationError):
        decode_sample(b"XXXX" + bytes(8))
    raw = encode_sample([np.zeros(2)])
    with pytest.raises(ConfigurationError):
        decode_sample(raw + b"\x00")


def test_dataset_round_trip_is_exact(tmp_path, small_cohort):
    t = build_table(len(small_cohort), [0.2, 0.1, 0.3, 0.0, 0.1], 3)
    masked = mask_cohort(small_cohort, t)
    write_dataset(tmp_path / "d", masked, t)
    back, t2 = read_dataset(tmp_path / "d")
    assert back.equals(masked)
    assert np.array_equal(t2.bits, t.bits)
    header = (tmp_path / "d" / "meta.csv").read_text().splitlines()[0]
    assert header == ",".join(META_HEADER)
    assert header == "sample_id,label,split,ebv_present,normal_present,t1_present,t1c_present,t2_present"
    assert (tmp_path / "d" / "SAMPLE_0.bin").exists()


def test_dataset_write_is_byte_deterministic(tmp_path):
    for name in ("a", "b"):
        write_dataset(tmp_path / name, gen_synthetic(SyntheticSpec(n_samples=12, image_shape=(1, 4, 4), seed=2)))
    for f in sorted((tmp_path / "a").iterdir()):
        assert f.read_bytes() == (tmp_path / "b" / f.name).read_bytes()


def test_missing_directory(tmp_path):
    with pytest.raises(ConfigurationError):
        read_dataset(tmp_path)


def test_flat_config_round_trip():
    values = {"a.x": 1, "a.y": 0.1, "b.name": 'q"uote', "b.list": [1.0, 2.5], "seed": 7, "flag": True}
    text = dump_flat(values)
    assert text.splitlines() == sorted(text.splitlines())
    assert parse_flat(text) == values


def test_parse_value_fallbacks():
    assert parse_value("3") == 3 and parse_value("[1, 2]") == [1, 2]
    assert parse_value("prompt") == "prompt"
    with pytest.raises(ConfigurationError):
        parse_flat("a = = 1")
