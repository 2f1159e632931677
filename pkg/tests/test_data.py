import numpy as np
import pytest

from metricgan_se import dsp
from metricgan_se.data import (MANIFEST_VERSION, MixSpec, load_pairs, make_pair, mix, pink_noise, read_manifest,
                               split, synth_dataset, toy_specs)


def signals(seed=0, n=8000):
    rng = np.random.default_rng(seed)
    return rng.uniform(-0.5, 0.5, n), rng.standard_normal(n)


def test_infinite_snr_returns_clean():
    clean, noise = signals()
    noisy, c = mix(clean, noise, float("inf"))
    np.testing.assert_array_equal(noisy, clean)
    np.testing.assert_array_equal(c, clean)


def test_zero_db_energies_equal():
    clean, noise = signals(1)
    noisy, _ = mix(clean, noise, 0.0)
    scaled = noisy - clean
    assert scaled @ scaled == pytest.approx(clean @ clean, rel=1e-6)


@pytest.mark.parametrize("snr", [-5.0, 0.0, 5.0, 10.0, 20.0])
def test_measured_snr_matches_request(snr):
    clean, noise = signals(2)
    noisy, _ = mix(clean, noise, snr)
    assert abs(dsp.snr_db(noisy, clean) - snr) < 0.01


def test_mix_errors():
    clean, noise = signals(3)
    with pytest.raises(ValueError, match="silent"):
        mix(np.zeros_like(clean), noise, 0.0)
    with pytest.raises(ValueError, match="silent"):
        mix(clean, np.zeros_like(noise), 0.0)
    with pytest.raises(ValueError, match="length mismatch"):
        mix(clean, noise[:-1], 0.0)
    with pytest.raises(ValueError, match="finite"):
        MixSpec(snr_db=float("nan"), seed=0)
    with pytest.raises(ValueError, match="shorter"):
        MixSpec(snr_db=0.0, seed=0, duration=0.01)


def test_pair_keeps_requested_snr_and_headroom():
    for noise in ("white", "pink"):
        noisy, clean, scale = make_pair(MixSpec(snr_db=5.0, seed=4, noise=noise))
        assert abs(dsp.snr_db(noisy, clean) - 5.0) < 0.01
        assert np.max(np.abs(noisy)) <= 1.0
        assert 0 < scale <= 1.0


def test_pink_noise_tilts_down():
    x = pink_noise(1 << 15, np.random.default_rng(5))
    p = np.abs(np.fft.rfft(x)) ** 2
    low, high = p[10:100].mean(), p[5000:10000].mean()
    assert low > 10 * high


def test_noise_from_file(tmp_path):
    dsp.write_wav(tmp_path / "n.wav", np.random.default_rng(6).uniform(-0.5, 0.5, 4000))
    noisy, clean, _ = make_pair(MixSpec(snr_db=0.0, seed=7, duration=0.5, noise=str(tmp_path / "n.wav")))
    assert len(noisy) == 8000
    assert abs(dsp.snr_db(noisy, clean)) < 0.01


def test_toy_specs_cover_grid():
    specs = toy_specs(36)
    assert len(specs) == 36
    assert {s.snr_db for s in specs} == {0.0, 5.0, 10.0}
    assert {s.noise for s in specs} == {"white", "pink"}
    assert len({s.seed for s in specs}) == 36


def test_synth_four_pairs(tmp_path):
    manifest = synth_dataset(toy_specs(4, duration=0.5), tmp_path, workers=2)
    assert len(list(tmp_path.glob("*.wav"))) == 8
    assert manifest.read_text().splitlines()[0] == f"# {MANIFEST_VERSION}"
    rows = read_manifest(manifest)
    assert len(rows) == 4
    for uid, noisy, clean in load_pairs(rows):
        assert len(noisy) == len(clean) == 8000
        assert np.max(np.abs(noisy)) <= 1.0


def test_synth_is_byte_deterministic(tmp_path):
    specs = toy_specs(3, duration=0.5, seed=1)
    synth_dataset(specs, tmp_path / "a")
    synth_dataset(specs, tmp_path / "b", workers=3)
    for f in sorted((tmp_path / "a").iterdir()):
        assert f.read_bytes() == (tmp_path / "b" / f.name).read_bytes()


def test_manifest_errors(tmp_path):
    manifest = synth_dataset(toy_specs(2, duration=0.5), tmp_path)
    text = manifest.read_text()
    (tmp_path / "old.csv").write_text("\n".join(text.splitlines()[1:]))
    with pytest.raises(ValueError, match="version"):
        read_manifest(tmp_path / "old.csv")
    (tmp_path / "utt0000_noisy.wav").unlink()
    with pytest.raises(FileNotFoundError, match="utt0000_noisy.wav"):
        load_pairs(read_manifest(manifest))


def test_split():
    items = list(range(10))
    tr, va = split(items, 0.8, seed=3)
    assert (len(tr), len(va)) == (8, 2)
    assert sorted(tr + va) == items
    assert split(items, 0.8, seed=3) == (tr, va)
    with pytest.raises(ValueError):
        split(items, 1.0)
    with pytest.raises(ValueError, match="at least 2"):
        split([1], 0.5)
