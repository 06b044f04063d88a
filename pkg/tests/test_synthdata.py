import numpy as np
import pytest
from hypothesis import given, settings
from hypothesis import strategies as st

from twincap.synthdata import (
    DatasetFormatError,
    LatentSpec,
    generate_arrays,
    generate_dataset,
    load_batch,
    load_dataset,
    read_header,
    read_record,
    spec_augment,
)

SMALL = dict(latent_dim=6, T=4, D=12, num_symbols=5, vocab_size=16)


@pytest.fixture(scope="module")
def small_file(tmp_path_factory):
    path = tmp_path_factory.mktemp("ds") / "small.bin"
    generate_dataset(LatentSpec(seed=3, **SMALL), 40, path)
    return path


def test_same_seed_gives_identical_bytes(tmp_path):
    spec = LatentSpec(seed=11, **SMALL)
    a = generate_dataset(spec, 10, tmp_path / "a.bin").read_bytes()
    b = generate_dataset(spec, 10, tmp_path / "b.bin").read_bytes()
    assert a == b
    c = generate_dataset(LatentSpec(seed=12, **SMALL), 10, tmp_path / "c.bin").read_bytes()
    assert a != c


def test_header_layout(small_file):
    raw = small_file.read_bytes()
    assert raw[:8] == b"TWCAPDS\0"
    assert int.from_bytes(raw[8:12], "little") == 1


def test_noise_free_shared_projection_gives_identical_views():
    arr = generate_arrays(LatentSpec(sigma=0.0, identical_views=True, **SMALL), 6)
    v = arr["views"]
    assert np.array_equal(v[:, 0], v[:, 1]) and np.array_equal(v[:, 1], v[:, 2])


def test_views_differ_by_default():
    v = generate_arrays(LatentSpec(**SMALL), 4)["views"]
    assert not np.allclose(v[:, 0], v[:, 1])


def test_captions_rederived_from_stored_latent(small_file):
    ds = load_dataset(small_file)
    cb = ds.codebook.astype(np.float64)
    for i in range(len(ds)):
        Z = ds.latent[i].astype(np.float64)
        sym = [int(np.argmax([Z[t] @ cb[:, k] for k in range(cb.shape[1])])) for t in range(ds.spec.T)]
        assert ds.captions[i].tolist() == [1] + [s + 3 for s in sym] + [2]


def test_views_rederived_from_projections():
    spec = LatentSpec(sigma=0.0, **SMALL)
    arr = generate_arrays(spec, 3)
    P = arr["projections"]
    Z = arr["latent"].astype(np.float64)
    for k in range(3):
        np.testing.assert_allclose(arr["views"][:, k], np.tanh(Z @ P.view_proj[k] + P.view_bias[k]), atol=1e-6)
    np.testing.assert_allclose(arr["text_feat"], Z @ P.text_proj, atol=1e-5)


def test_invalid_specs_and_counts(tmp_path):
    for bad in (dict(num_symbols=1), dict(num_symbols=14), dict(T=0), dict(sigma=-1.0)):
        kw = dict(SMALL)
        kw.update(bad)
        with pytest.raises(ValueError):
            generate_dataset(LatentSpec(**kw), 4, tmp_path / "x.bin")
    with pytest.raises(ValueError):
        generate_dataset(LatentSpec(**SMALL), 0, tmp_path / "x.bin")


def test_truncated_file_reports_record_index(small_file, tmp_path):
    raw = small_file.read_bytes()
    bad = tmp_path / "trunc.bin"
    bad.write_bytes(raw[:-20])
    with pytest.raises(DatasetFormatError, match="malformed record 39"):
        load_dataset(bad)


def test_bad_magic_and_version(small_file, tmp_path):
    raw = bytearray(small_file.read_bytes())
    p = tmp_path / "m.bin"
    p.write_bytes(b"XXXXXXXX" + raw[8:])
    with pytest.raises(DatasetFormatError, match="magic"):
        load_dataset(p)
    raw[8] = 9
    p.write_bytes(bytes(raw))
    with pytest.raises(DatasetFormatError, match="version"):
        load_dataset(p)


def test_non_integer_caption_token_reports_index(small_file, tmp_path):
    ds = load_dataset(small_file)
    _, offset = read_header(small_file)
    rec = ds.views[0].size + ds.text_feat[0].size + ds.latent[0].size + ds.captions.shape[1]
    raw = np.fromfile(small_file, dtype="<f4", offset=offset)
    raw[7 * rec + rec - 1] = 2.5
    p = tmp_path / "frac.bin"
    p.write_bytes(small_file.read_bytes()[:offset] + raw.astype("<f4").tobytes())
    with pytest.raises(DatasetFormatError, match="malformed record 7"):
        load_dataset(p)


def test_missing_file():
    with pytest.raises(OSError):
        load_dataset("/nonexistent/ds.bin")


# ---------------------------------------------------------------------------
# batches


def test_batches_same_seed_identical(small_file):
    ds = load_dataset(small_file)
    a = [b.indices.tolist() for b in load_batch(ds, 8, shuffle_seed=5, epoch=2)]
    b = [b.indices.tolist() for b in load_batch(ds, 8, shuffle_seed=5, epoch=2)]
    c = [b.indices.tolist() for b in load_batch(ds, 8, shuffle_seed=5, epoch=3)]
    assert a == b and a != c


def test_every_sample_once_per_epoch(small_file):
    ds = load_dataset(small_file)
    seen = np.concatenate([b.indices for b in load_batch(ds, 7, shuffle_seed=1)])
    assert sorted(seen.tolist()) == list(range(len(ds)))
    full = [len(b.indices) for b in load_batch(ds, 7, shuffle_seed=1, drop_last=True)]
    assert full == [7] * 5


def test_batch_tensors_match_record_reads(small_file):
    ds = load_dataset(small_file)
    batch = next(iter(load_batch(ds, 6, shuffle_seed=9)))
    for row, i in enumerate(batch.indices):
        rec = read_record(small_file, int(i))
        for k in range(3):
            np.testing.assert_array_equal(batch.views[k][row], rec["views"][k])
        np.testing.assert_array_equal(batch.text_feat[row], rec["text_feat"])
        assert batch.captions.token_ids[row].tolist() == rec["caption"].astype(int).tolist()


# ---------------------------------------------------------------------------
# generator sanity


def test_single_view_linear_probe_beats_chance():
    spec = LatentSpec(seed=7)
    arr = generate_arrays(spec, 32)
    syms = arr["caption"][:, 1:-1].reshape(-1) - 3
    for k in range(3):
        X = arr["views"][:, k].reshape(-1, spec.D).astype(np.float64)
        Y = np.eye(spec.num_symbols)[syms]
        X1 = np.hstack([X, np.ones((len(X), 1))])
        W = np.linalg.solve(X1.T @ X1 + 1e-2 * np.eye(X1.shape[1]), X1.T @ Y)
        acc = np.mean(np.argmax(X1 @ W, 1) == syms)
        assert acc > 1.5 / spec.num_symbols


@pytest.mark.parametrize("sigma", [0.0, 0.05, 0.1])
def test_pooled_view_predicts_pooled_text(sigma):
    spec = LatentSpec(seed=7, sigma=sigma)
    arr = generate_arrays(spec, 256)
    X = arr["views"][:, 0].mean(axis=1).astype(np.float64)
    Y = arr["text_feat"].mean(axis=1).astype(np.float64)
    tr, te = slice(0, 192), slice(192, 256)
    X1 = np.hstack([X, np.ones((len(X), 1))])
    W = np.linalg.solve(X1[tr].T @ X1[tr] + 1.0 * np.eye(X1.shape[1]), X1[tr].T @ Y[tr])
    resid = Y[te] - X1[te] @ W
    r2 = 1 - (resid ** 2).sum() / ((Y[te] - Y[te].mean(0)) ** 2).sum()
    assert r2 > 0.5


# ---------------------------------------------------------------------------
# augmentation


def test_zero_masks_identity():
    x = np.random.default_rng(0).standard_normal((2, 8, 16))
    out = spec_augment(x, 0, 0, 1, 2, np.random.default_rng(1))
    assert np.array_equal(out, x) and out is not x


@settings(max_examples=25, deadline=None)
@given(seed=st.integers(0, 10**6), nt=st.integers(0, 3), nf=st.integers(0, 3))
def test_masked_entries_zero_rest_unchanged(seed, nt, nf):
    rng = np.random.default_rng(seed)
    x = rng.uniform(1, 2, (3, 8, 16))  # strictly non-zero
    out = spec_augment(x, nt, nf, 2, 4, rng)
    masked = out == 0
    assert np.array_equal(out[~masked], x[~masked])
    # masked region per sample is a union of full rows and full columns
    for b in range(3):
        rows = masked[b].all(axis=1)
        cols = masked[b].all(axis=0)
        assert np.array_equal(masked[b], rows[:, None] | cols[None, :])


def _expected_masked_fraction(T, D, nt, nf, wt, wf):
    def p_covered(L, n, W):
        # probability a fixed position stays uncovered by one band, averaged over positions
        stay = np.zeros(L)
        for w in range(W + 1):
            for s in range(L - w + 1):
                hit = np.zeros(L)
                hit[s:s + w] = 1
                stay += (1 - hit) / ((W + 1) * (L - w + 1))
        return 1 - stay ** n

    pt, pf = p_covered(T, nt, wt), p_covered(D, nf, wf)
    return 1 - np.mean(np.outer(1 - pt, 1 - pf))


def test_masked_fraction_matches_closed_form():
    T, D, wt, wf = 8, 64, 1, 8
    rng = np.random.default_rng(0)
    x = np.ones((10_000, T, D))
    frac = (spec_augment(x, 2, 2, wt, wf, rng) == 0).mean()
    expected = _expected_masked_fraction(T, D, 2, 2, wt, wf)
    assert abs(frac - expected) <= 0.1 * expected


def test_mask_wider_than_axis_rejected():
    with pytest.raises(ValueError):
        spec_augment(np.ones((1, 4, 8)), 1, 1, 5, 2, np.random.default_rng(0))
