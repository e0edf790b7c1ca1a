import numpy as np
import pytest
from scipy import ndimage

from aeseg.data import (
    HEALTHY, LESION, Manifest, PhantomParams, Volume, build_manifest, generate_cohort, generate_phantom,
    read_volume, write_dataset, write_volume,
)
from aeseg.errors import ConfigError, FormatError


def test_same_seed_identical():
    a = generate_phantom(PhantomParams(seed=11), LESION)
    b = generate_phantom(PhantomParams(seed=11), LESION)
    assert a.image == b.image and a.lesion_mask == b.lesion_mask and a.brain_mask == b.brain_mask


def test_different_seeds_differ():
    a = generate_phantom(PhantomParams(seed=1), HEALTHY)
    b = generate_phantom(PhantomParams(seed=2), HEALTHY)
    assert a.image != b.image


def test_healthy_has_no_lesion():
    r = generate_phantom(PhantomParams(seed=3), HEALTHY)
    assert r.lesion_mask.data.sum() == 0


def test_unknown_cohort():
    with pytest.raises(ConfigError):
        generate_phantom(PhantomParams(), "sick")


@pytest.mark.slow
def test_generator_contracts_over_100_seeds():
    structure = ndimage.generate_binary_structure(3, 1)
    for seed in range(100):
        for cohort in (HEALTHY, LESION):
            r = generate_phantom(PhantomParams(seed=seed), cohort)
            img, brain, les = r.image.data, r.brain_mask.data, r.lesion_mask.data
            assert img.dtype == np.float32 and brain.dtype == les.dtype == np.uint8
            assert img.min() >= 0.0 and img.max() <= 1.0
            assert set(np.unique(brain)) <= {0, 1} and set(np.unique(les)) <= {0, 1}
            assert not (les & ~brain).any()
            if cohort == HEALTHY:
                assert les.sum() == 0
                continue
            labels, n = ndimage.label(les, structure)
            assert 1 <= n
            assert np.bincount(labels.ravel())[1:].min() >= 6
            # same seed -> same anatomy; the clamped bump is >= 1/2 inside the lesion radius
            twin = generate_phantom(PhantomParams(seed=seed), HEALTHY).image.data
            lift = 0.5 * PhantomParams().lesion_boost[0]
            need = np.minimum(twin + lift, 1.0) - 1e-6
            assert (img[les > 0] >= need[les > 0]).all(), seed


def test_params_validation():
    with pytest.raises(ConfigError):
        PhantomParams(lesion_radius=(1.0, 2.0))
    with pytest.raises(ConfigError):
        PhantomParams(dims=(0, 4, 4))


class TestVolumeFormat:
    def test_round_trip_f32(self, tmp_path):
        v = Volume(np.random.default_rng(0).random((3, 5, 4), dtype=np.float32))
        write_volume(v, tmp_path / "a.vol")
        assert read_volume(tmp_path / "a.vol") == v

    def test_round_trip_u8(self, tmp_path):
        v = Volume((np.random.default_rng(1).random((2, 3, 4)) > 0.5).astype(np.uint8))
        write_volume(v, tmp_path / "m.vol")
        w = read_volume(tmp_path / "m.vol")
        assert w == v and w.data.dtype == np.uint8

    def test_file_size(self, tmp_path):
        write_volume(Volume(np.zeros((16, 64, 64), np.float32)), tmp_path / "a.vol")
        assert (tmp_path / "a.vol").stat().st_size == 32 + 16 * 64 * 64 * 4

    def test_header_layout_little_endian(self, tmp_path):
        write_volume(Volume(np.full((2, 3, 4), 1.0, np.float32)), tmp_path / "a.vol")
        raw = (tmp_path / "a.vol").read_bytes()
        assert raw[:6] == b"AAVOL1" and raw[6] == 0 and raw[7] == 0
        assert raw[8:20] == (2).to_bytes(4, "little") + (3).to_bytes(4, "little") + (4).to_bytes(4, "little")
        assert raw[20:32] == bytes(12)
        assert raw[32:36] == bytes.fromhex("0000803f")

    def test_bad_magic(self, tmp_path):
        write_volume(Volume(np.zeros((1, 2, 2), np.float32)), tmp_path / "a.vol")
        raw = bytearray((tmp_path / "a.vol").read_bytes())
        raw[0:6] = b"BADVOL"
        (tmp_path / "a.vol").write_bytes(bytes(raw))
        with pytest.raises(FormatError) as exc:
            read_volume(tmp_path / "a.vol")
        assert exc.value.offset == 0

    def test_truncated(self, tmp_path):
        write_volume(Volume(np.zeros((1, 2, 2), np.float32)), tmp_path / "a.vol")
        raw = (tmp_path / "a.vol").read_bytes()
        (tmp_path / "a.vol").write_bytes(raw[:-3])
        with pytest.raises(FormatError, match="offset"):
            read_volume(tmp_path / "a.vol")

    def test_dim_overflow(self, tmp_path):
        import struct
        (tmp_path / "a.vol").write_bytes(struct.pack("<6sBBIII12s", b"AAVOL1", 0, 0, 2 ** 20, 2 ** 20, 2 ** 20, bytes(12)))
        with pytest.raises(FormatError):
            read_volume(tmp_path / "a.vol")


def _records(n_healthy=10, n_lesion=3):
    return generate_cohort(PhantomParams(seed=0, dims=(4, 16, 16), lesion_radius=(1.5, 2.0)), n_healthy, n_lesion)


class TestManifest:
    def test_lesion_never_in_train(self):
        m = build_manifest(_records(), train_frac=0.8, seed=1)
        assert all(e.cohort == HEALTHY for e in m.train)
        assert {e.id for e in m.test} >= {e.id for e in m.patients if e.cohort == LESION}

    def test_split_arithmetic(self):
        m = build_manifest(_records(), train_frac=0.8, seed=1)
        assert len(m.train) == 8
        assert sum(e.cohort == HEALTHY for e in m.test) == 2

    def test_deterministic_and_disjoint(self):
        recs = _records()
        a = build_manifest(recs, 0.8, seed=4)
        b = build_manifest(recs, 0.8, seed=4)
        assert [e.split for e in a.patients] == [e.split for e in b.patients]
        assert not {e.id for e in a.train} & {e.id for e in a.test}

    def test_default_trains_on_all_healthy(self):
        m = build_manifest(_records())
        assert len(m.train) == 10 and all(e.cohort == LESION for e in m.test)

    def test_empty_cohort(self):
        recs = _records()
        with pytest.raises(ConfigError):
            build_manifest([r for r in recs if r.cohort == HEALTHY])

    def test_write_and_read_back(self, tmp_path):
        recs = _records(3, 2)
        path = write_dataset(recs, tmp_path, 1.0, 0)
        m = Manifest.read(path)
        assert len(m.patients) == 5
        r = m.load(m.patients[-1])
        assert r.image == recs[-1].image and r.lesion_mask == recs[-1].lesion_mask
