"""Acceptance gate: one test per criterion, each within its runtime budget.

Every test prints ``criterion N: PASS|FAIL ...``; the session summary repeats
the lines in order.  Criteria 7 and 8 share one synthetic corpus, autoencoder
and GAN; the shared setup time is charged to both.
"""

import functools
import math
import time

import numpy as np
import pytest

from s2i import data, dsp, losses, models, training
from s2i import eval as ev
from s2i.diagnostics import gradient_suite
from s2i.nn import Linear, RngState, gradcheck, xavier_init

from .oracles import dft_power, ma_loss_loops, moving_average_prefix, mse_loops, score_loss_loops

RESULTS: dict[int, str] = {}


def criterion(number: int, title: str, budget: float):
    def wrap(fn):
        @functools.wraps(fn)
        def run(*args, **kwargs):
            t0 = time.perf_counter()
            charged = sum(getattr(v, "setup_seconds", 0.0) for v in kwargs.values())
            status, detail = "FAIL", ""
            try:
                fn(*args, **kwargs)
                elapsed = time.perf_counter() - t0 + charged
                assert elapsed < budget, f"took {elapsed:.1f} s, budget {budget:.0f} s"
                status = "PASS"
            except BaseException as exc:
                detail = f" ({type(exc).__name__}: {' '.join(str(exc).split())[:120]})"
                raise
            finally:
                elapsed = time.perf_counter() - t0 + charged
                line = f"criterion {number:2d}: {status} {title} [{elapsed:.1f} s / {budget:.0f} s]{detail}"
                RESULTS[number] = line
                print(line)
        return run
    return wrap


# -- 1. DSP ----------------------------------------------------------------------


@criterion(1, "DSP golden suite", 10)
def test_criterion_01_dsp():
    ref = dsp.REFERENCE_FRONTEND
    seg = dsp.AudioSegment(np.random.default_rng(0).uniform(-1, 1, 16000), 16000)
    assert dsp.log_mel_spectrogram(seg, ref).shape == (100, 128)
    w = dsp.hamming_window(ref.frame_length)
    assert w[0] == pytest.approx(0.08, abs=1e-15) and w[-1] == pytest.approx(0.08, abs=1e-15)
    fb = dsp.mel_filterbank(ref)
    centers = dsp.mel_center_frequencies(ref)
    bands = [j for j in range(ref.n_mels) if np.count_nonzero(fb[j]) >= 3]
    t = np.arange(16000) / 16000
    for j in bands[::6]:
        tone = dsp.AudioSegment(0.5 * np.cos(2 * np.pi * centers[j] * t), 16000)
        frames = dsp.frame_signal(tone, ref)[:2]
        oracle = np.array([fb @ dft_power(f * w, ref.fft_size) for f in frames])
        fast = np.exp(dsp.log_mel_spectrogram(tone, ref).values[:2])
        assert np.max(np.abs(fast - oracle) / oracle) < 1e-6
        assert int(np.argmax(fast[1])) == j


# -- 2. loss equations ---------------------------------------------------------------


@criterion(2, "equation oracles", 30)
def test_criterion_02_equations():
    g = np.random.default_rng(2)
    assert losses.ma_adv_loss(0.9, losses.AdvLossHistory(3, [0.6, 0.3]), 3) == pytest.approx(0.6, abs=1e-12)
    for dtype, tol in ((np.float32, 1e-7), (np.float64, 1e-12)):
        for _ in range(100):
            S, S_hat = g.uniform(-1, 1, (2, 3, 5, 6)).astype(dtype)
            Y, Y_hat = g.uniform(-1, 1, (2, 2, 3, 4, 4)).astype(dtype)
            r = g.uniform(-1, 1, 16).astype(dtype)
            assert abs(losses.pixel_loss_spec(S, S_hat) - mse_loops(S, S_hat)) < tol
            assert abs(losses.score_loss(-1.0, r) - score_loss_loops(-1.0, r)) < tol
            assert abs(losses.pixel_loss_img(Y, Y_hat) - mse_loops(Y, Y_hat)) < tol
            adv = losses.adv_loss(1.0, r)
            assert abs(adv - score_loss_loops(1.0, r)) < tol
            means = [float(v) for v in g.uniform(0, 2, 12).astype(dtype)]
            k, t = int(g.integers(1, 15)), int(g.integers(1, 14))
            ma = losses.ma_adv_loss(adv, losses.AdvLossHistory(k, means), t)
            assert abs(ma - ma_loss_loops(adv, means, t, k)) < tol
            lam = float(g.uniform(0, 1))
            total = losses.generator_total_loss(losses.pixel_loss_img(Y, Y_hat), ma, lam)
            assert abs(total - (mse_loops(Y, Y_hat) + lam * ma_loss_loops(adv, means, t, k))) < tol


# -- 3. initialization -----------------------------------------------------------------


@criterion(3, "Xavier initialization statistics", 30)
def test_criterion_03_init():
    w = xavier_init(64, 64, np.random.default_rng(3), shape=(10**6,), dtype=np.float64)
    assert np.all(np.abs(w) <= math.sqrt(6 / 128))
    assert abs(w.mean()) < 1e-3
    assert abs(w.var() / (2 / 128) - 1) < 0.02


# -- 4. gradients ----------------------------------------------------------------------------


class _SignFlipped(Linear):
    def backward(self, dout, cache):
        dx, grads = super().backward(dout, cache)
        return -dx, {k: -v for k, v in grads.items()}


@criterion(4, "gradient suite with negative control", 120)
def test_criterion_04_gradients():
    rows = gradient_suite(seed=0)
    assert all(r.passed for r in rows), [(r.name, r.max_error) for r in rows if not r.passed]
    g = np.random.default_rng(4)
    assert not gradcheck(_SignFlipped(4, 3, g, np.float64), g.standard_normal((3, 4))).passed


# -- 5 and 6. schedule, freezing, determinism, resume ----------------------------------------


def _small_gan_setup():
    schema = models.ModelSchema.tiny(8, generator_blocks=2, encoder_depth=5)
    g = np.random.default_rng(5)
    specs = g.uniform(-1, 1, (8, 20, 32)).astype(np.float32)
    images = g.uniform(-1, 1, (8, 3, 24, 24)).astype(np.float32)
    cfg = training.TrainingConfig(batch_size=4, ae_epochs=2, gan_iterations=100, n_gd=5, seed=1,
                                  checkpoint_every=50)
    encoder = training.train_autoencoder(specs, schema, cfg).encoder
    return schema, specs, images, cfg, encoder


@criterion(5, "schedule and freezing", 120)
def test_criterion_05_schedule():
    schema, specs, images, cfg, encoder = _small_gan_setup()
    before = training.param_digest(encoder)
    cfg = training.TrainingConfig(**{**cfg.to_dict(), "verify_freezing": True})
    res = training.train_gan(specs, images, encoder, schema, cfg)
    assert (res.ledger.d_updates, res.ledger.g_updates) == (20, 100)
    assert training.param_digest(encoder) == before
    d_rows = [r for r in res.ledger.records if r["d_update"]]
    assert len(d_rows) == 20 and all(r["n_real"] == r["n_fake"] == cfg.batch_size for r in d_rows)


@criterion(6, "determinism and resume", 180)
def test_criterion_06_resume(tmp_path):
    schema, specs, images, cfg, encoder = _small_gan_setup()
    a = training.train_gan(specs, images, encoder, schema, cfg, run_dir=tmp_path / "a")
    b = training.train_gan(specs, images, encoder, schema, cfg, run_dir=tmp_path / "b")
    assert (tmp_path / "a/gan/loss.csv").read_bytes() == (tmp_path / "b/gan/loss.csv").read_bytes()
    ckpt = tmp_path / "a/gan/checkpoints/iter_0000050.s2ic"
    resumed = training.train_gan(specs, images, encoder, schema, cfg, resume=ckpt)
    for x, y in zip(a.ledger.records, resumed.ledger.records, strict=True):
        for key in ("pixel", "adv", "ma_adv", "d_loss"):
            if x.get(key) is not None:
                assert abs(x[key] - y[key]) <= 1e-6, (x["iteration"], key)
    assert b.ledger.loss_csv() == a.ledger.loss_csv()


# -- 7 and 8. shared synthetic end-to-end run ---------------------------------------------------

CORPUS = data.SynthConfig(n_classes=2, scenes_per_class=18, segments_per_scene=5, noise_level=0.1, seed=3)
E2E = training.TrainingConfig(batch_size=16, ae_epochs=200, gan_epochs=500, seed=0)


class Timed:
    def __init__(self, setup_seconds, **values):
        self.setup_seconds = setup_seconds
        self.__dict__.update(values)


@pytest.fixture(scope="module")
def corpus(tmp_path_factory):
    t0 = time.perf_counter()
    root = tmp_path_factory.mktemp("corpus")
    scenes = data.synth_dataset(CORPUS, root)
    splits = data.build_splits(scenes, ratios=(1 / 3, 0.0, 2 / 3), seed=0)
    fe = dsp.TINY_FRONTEND
    stats = dsp.compute_norm_stats(data.featurize(root, splits["train"].segments, fe))
    schema = models.ModelSchema.tiny(16)
    train = data.load_triples(root, splits["train"], fe, stats, schema.image_size, CORPUS.class_names)
    test = data.load_triples(root, splits["test"], fe, stats, schema.image_size, CORPUS.class_names)
    return Timed(time.perf_counter() - t0, schema=schema, train=train, test=test, splits=splits)


@pytest.fixture(scope="module")
def autoencoder(corpus):
    t0 = time.perf_counter()
    nets = models.build_model(corpus.schema, RngState(E2E.seed))
    result = training.train_autoencoder(corpus.train.spectrograms, corpus.schema, E2E, nets=nets)
    return Timed(corpus.setup_seconds + time.perf_counter() - t0, nets=nets, result=result)


@pytest.fixture(scope="module")
def gan(corpus, autoencoder):
    t0 = time.perf_counter()
    result = training.train_gan(corpus.train.spectrograms, corpus.train.images, autoencoder.result.encoder,
                                 corpus.schema, E2E, nets=autoencoder.nets)
    return Timed(autoencoder.setup_seconds + time.perf_counter() - t0, result=result,
                 encoder=autoencoder.result.encoder)


@criterion(7, "autoencoder convergence", 300)
def test_criterion_07_autoencoder(autoencoder):
    rows = autoencoder.result.ledger.epoch_rows
    assert len(rows) == 200
    assert rows[-1]["pixel"] <= 0.5 * rows[0]["pixel"]


@criterion(8, "end-to-end crossmodal signal", 1200)
def test_criterion_08_crossmodal(corpus, gan):
    test = corpus.test
    assert len(test) >= 100
    assert not corpus.splits["train"].scene_ids & corpus.splits["test"].scene_ids
    oracle = ev.TemplateOracle.fit(corpus.train.images, corpus.train.labels, corpus.train.class_names)
    images = ev.translate(gan.result.generator, gan.encoder, test.spectrograms, seed=5)
    scores = oracle.scores(images)
    for k in range(2):
        assert scores[test.labels == k, k].mean() > scores[test.labels != k, k].mean()
    stat, p = ev.permutation_test(scores, test.labels, n_permutations=2000, seed=0)
    print(f"crossmodal statistic={stat:.4f} p={p:.5f} n_sounds={len(test)}")
    assert stat > 0 and p < 0.01


@criterion(9, "test-time dropout diversity", 60)
def test_criterion_09_dropout(tmp_path):
    # a short self-contained run: an untrained generator sees near-zero embeddings
    synth = data.SynthConfig(n_classes=2, scenes_per_class=6, segments_per_scene=4, noise_level=0.1, seed=9)
    fe, schema = dsp.TINY_FRONTEND, models.ModelSchema.tiny(16)
    scenes = data.synth_dataset(synth, tmp_path)
    split = data.SplitManifest("all", [r for s in scenes for r in s.refs()])
    stats = dsp.compute_norm_stats(data.featurize(tmp_path, split.segments, fe))
    pairs = data.load_triples(tmp_path, split, fe, stats, schema.image_size, synth.class_names)
    cfg = training.TrainingConfig(batch_size=16, ae_epochs=60, gan_epochs=40, seed=0)
    nets = models.build_model(schema, RngState(0))
    encoder = training.train_autoencoder(pairs.spectrograms, schema, cfg, nets=nets).encoder
    generator = training.train_gan(pairs.spectrograms, pairs.images, encoder, schema, cfg, nets=nets).generator

    for i in range(4):
        x = models.encode_audio(encoder, pairs.spectrograms[i:i + 1])
        rng = RngState(11 + i)
        a = models.generate_image(generator, x, rng=rng)
        b = models.generate_image(generator, x, rng=rng)
        assert float(np.mean(np.abs(a - b))) > 0.01
        c = models.generate_image(generator, x, rng=RngState(2), dropout=False)
        d = models.generate_image(generator, x, rng=RngState(3), dropout=False)
        assert c.tobytes() == d.tobytes()


# -- 10. split integrity ---------------------------------------------------------------------------


@criterion(10, "split integrity over 1000 random corpora", 60)
def test_criterion_10_splits():
    g = np.random.default_rng(10)
    for trial in range(1000):
        n_classes = int(g.integers(1, 5))
        scenes = []
        for k in range(n_classes):
            for j in range(int(g.integers(3, 12))):
                sid = f"k{k}-s{j}-{g.integers(1 << 40)}"
                segs = [{"segment_index": s, "audio_path": "a", "image_path": "i"} for s in range(g.integers(1, 5))]
                scenes.append(data.SceneRecord(sid, f"class{k}", segs))
        splits = data.build_splits(scenes, seed=trial)
        owner = {}
        for name, split in splits.items():
            for ref in split.segments:
                assert owner.setdefault(ref.scene_id, name) == name
            assert len(set(split.class_counts().values())) <= 1


# -- 11. reporting -----------------------------------------------------------------------------------


@criterion(11, "reporting moving average and masking", 10)
def test_criterion_11_reporting():
    g = np.random.default_rng(11)
    values = g.uniform(0, 1, 4000)
    m = ev.epoch_metrics(values, w=50)
    assert np.max(np.abs(m.smoothed - moving_average_prefix(values, 50))) <= 1e-12
    masked = set(int(e) for e in g.choice(np.arange(1, 4001), 300, replace=False))
    m = ev.epoch_metrics(values, w=50, masked_epochs=masked, n_prior=5)
    flags = m.masked
    assert set(np.flatnonzero(flags) + 1) == masked
    assert m.values[~flags].tobytes() == values[~flags].tobytes()
    clean = np.flatnonzero(~flags)
    for e in masked:
        prior = clean[clean < e - 1][-5:]
        expect = values[prior].mean() if prior.size else values[e - 1]
        assert m.values[e - 1] == pytest.approx(expect, abs=1e-15)
