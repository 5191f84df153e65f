import hashlib
from collections import Counter
from pathlib import Path

import numpy as np
import pytest
from hypothesis import given, settings
from hypothesis import strategies as st
from PIL import Image

from s2i import dsp
from s2i.data import (REFERENCE_CLASSES, REFERENCE_SPLIT_COUNTS, SceneRecord, SplitManifest, SynthConfig,
                      balance_classes, bilinear_resize, build_splits, center_crop_box, center_crop_resize,
                      load_image, read_manifest, read_split, select_central_frame, synth_audio, synth_dataset,
                      write_manifest, write_split)

cv2 = pytest.importorskip("cv2")


def _scenes(n_per_class, n_classes=2, segs=3, seed=0):
    g = np.random.default_rng(seed)
    scenes = []
    for k in range(n_classes):
        for j in range(n_per_class):
            sid = f"c{k}-{j:04d}-{g.integers(1 << 30)}"
            segments = [{"segment_index": s, "audio_path": f"a/{sid}_{s}.wav", "image_path": f"i/{sid}_{s}.png"}
                        for s in range(segs)]
            scenes.append(SceneRecord(sid, f"class{k}", segments))
    return scenes


# -- splits ----------------------------------------------------------------------


def test_five_scene_split_is_disjoint():
    splits = build_splits(_scenes(5), (0.6, 0.2, 0.2))
    ids = [s.scene_ids for s in splits.values()]
    assert not (ids[0] & ids[1]) and not (ids[0] & ids[2]) and not (ids[1] & ids[2])
    assert all(len(s) > 0 for s in splits.values())


def test_large_corpus_has_no_scene_collision():
    scenes = _scenes(500, n_classes=2, segs=2, seed=1)
    splits = build_splits(scenes, seed=4)
    owner = {}
    for name, split in splits.items():
        for ref in split.segments:
            assert owner.setdefault(ref.scene_id, name) == name


@settings(max_examples=25)
@given(st.integers(3, 12), st.integers(1, 4), st.integers(1, 3), st.integers(0, 10**6))
def test_splits_disjoint_and_balanced(n, n_classes, segs, seed):
    splits = build_splits(_scenes(n, n_classes, segs, seed), seed=seed)
    names = list(splits)
    for i in range(3):
        for j in range(i + 1, 3):
            assert not splits[names[i]].scene_ids & splits[names[j]].scene_ids
        counts = set(splits[names[i]].class_counts().values())
        assert len(counts) <= 1


def test_split_order_is_sorted_and_deterministic():
    scenes = _scenes(6, seed=2)
    a, b = build_splits(scenes, seed=3), build_splits(list(reversed(scenes)), seed=3)
    for name in a:
        assert a[name].segments == b[name].segments
        keys = [(r.scene_id, r.segment_index) for r in a[name].segments]
        assert keys == sorted(keys)


def test_split_targets_and_shortfall():
    splits = build_splits(_scenes(10, segs=3), (0.6, 0.2, 0.2), targets={"train": 12})
    assert splits["train"].class_counts() == {"class0": 12, "class1": 12}
    with pytest.raises(ValueError, match="short by"):
        build_splits(_scenes(10, segs=3), targets={"val": 50})
    with pytest.raises(ValueError, match="insufficient scenes"):
        build_splits(_scenes(2))
    with pytest.raises(ValueError):
        build_splits(_scenes(5), (0.5, 0.5, 0.5))


def test_reference_targets_recorded():
    assert REFERENCE_SPLIT_COUNTS == {"train": 9789, "val": 1115, "test": 1365}
    assert len(REFERENCE_CLASSES) == 5


def test_balance_examples():
    data = {"a": list(range(10)), "b": list(range(7)), "c": list(range(9))}
    out = balance_classes(data, seed=1)
    assert {k: len(v) for k, v in out.items()} == {"a": 7, "b": 7, "c": 7}
    assert out == balance_classes(data, seed=1)
    same = {"a": [1, 2], "b": [3, 4]}
    assert balance_classes(same) == same
    with pytest.raises(ValueError):
        balance_classes({"a": [], "b": [1]})


def test_balance_subset_is_uniform():
    hits = Counter()
    trials = 4000
    for seed in range(trials):
        hits.update(balance_classes({"a": list(range(10)), "b": list(range(5))}, seed=seed)["a"])
    freq = np.array([hits[i] / trials for i in range(10)])
    # each item is kept with probability 1/2; 5 sigma band
    assert np.all(np.abs(freq - 0.5) < 5 * np.sqrt(0.25 / trials))


def test_manifest_roundtrip_and_validation(tmp_path):
    scenes = _scenes(3)
    write_manifest(tmp_path / "m.jsonl", scenes)
    back = read_manifest(tmp_path / "m.jsonl")
    assert [s.scene_id for s in back] == sorted(s.scene_id for s in scenes)
    lines = (tmp_path / "m.jsonl").read_text().splitlines()
    (tmp_path / "dup.jsonl").write_text("\n".join([lines[0], lines[0]]))
    with pytest.raises(ValueError, match="duplicate"):
        read_manifest(tmp_path / "dup.jsonl")
    (tmp_path / "bad.jsonl").write_text(lines[0].replace('"image_path": "i/', '"image_path": "", "x": "'))
    with pytest.raises(ValueError, match="modality"):
        read_manifest(tmp_path / "bad.jsonl")


def test_split_file_roundtrip(tmp_path):
    split = build_splits(_scenes(5))["train"]
    write_split(tmp_path / "train.jsonl", split)
    assert read_split(tmp_path / "train.jsonl").segments == split.segments


# -- images -------------------------------------------------------------------------


def test_identity_geometry_at_target_size(rng):
    img = rng.integers(0, 256, (96, 96, 3), dtype=np.uint8)
    out = center_crop_resize(img, 96)
    np.testing.assert_allclose(out, img.transpose(2, 0, 1) / 127.5 - 1, atol=1e-6)


def test_center_crop_box_wide_frame():
    assert center_crop_box(360, 640) == (0, 140, 360, 500)
    assert center_crop_box(640, 360) == (140, 0, 500, 360)


def test_wide_frame_uses_center_columns(rng):
    img = np.zeros((360, 640, 3), np.uint8)
    img[:, 140:500] = 200
    out = center_crop_resize(img, 96)
    np.testing.assert_allclose(out, 200 / 127.5 - 1, atol=1e-6)


@pytest.mark.parametrize("shape", [(10, 17), (96, 96), (300, 201)])
def test_constant_image_stays_constant(shape):
    out = center_crop_resize(np.full((*shape, 3), 51, np.uint8), 96)
    np.testing.assert_allclose(out, 51 / 127.5 - 1, atol=1e-6)
    assert out.shape == (3, 96, 96) and out.dtype == np.float32


@pytest.mark.parametrize("src", [200, 50, 97])
def test_bilinear_matches_opencv(src):
    yy, xx = np.mgrid[0:src, 0:src]
    img = np.stack([xx * 255 / src, yy * 255 / src, (xx + yy) * 127 / src], axis=2).astype(np.uint8)
    ours = center_crop_resize(img, 96)
    ref = cv2.resize(img, (96, 96), interpolation=cv2.INTER_LINEAR).astype(np.float64)
    assert np.max(np.abs((ours.transpose(1, 2, 0) + 1) * 127.5 - ref)) <= 1.0


def test_bilinear_rejects_bad_input():
    with pytest.raises(ValueError):
        center_crop_resize(np.zeros((4, 4)), 96)
    with pytest.raises(ValueError):
        center_crop_resize(np.zeros((0, 4, 3)), 96)


def test_load_image_rejects_non_rgb(tmp_path):
    Image.fromarray(np.zeros((5, 5), np.uint8), mode="L").save(tmp_path / "g.png")
    with pytest.raises(ValueError, match="RGB"):
        load_image(tmp_path / "g.png")


def test_central_frame():
    assert select_central_frame(range(25)) == 12
    assert select_central_frame([7]) == 7
    assert select_central_frame(range(24)) == 12
    with pytest.raises(ValueError):
        select_central_frame([])


def test_bilinear_upsample_interpolates():
    out = bilinear_resize(np.array([[0.0, 1.0]]), 1, 4)
    np.testing.assert_allclose(out, [[0, 0.25, 0.75, 1.0]])


# -- synthetic corpus ----------------------------------------------------------------------


def _digest(root: Path) -> str:
    h = hashlib.sha256()
    for p in sorted(root.rglob("*")):
        if p.is_file():
            h.update(str(p.relative_to(root)).encode())
            h.update(p.read_bytes())
    return h.hexdigest()


def test_synth_counts_and_determinism(tmp_path):
    cfg = SynthConfig(n_classes=2, scenes_per_class=10, segments_per_scene=3)
    scenes = synth_dataset(cfg, tmp_path / "a")
    synth_dataset(cfg, tmp_path / "b")
    assert len(list((tmp_path / "a/audio").glob("*.wav"))) == 60
    assert len(list((tmp_path / "a/images").glob("*.png"))) == 60
    assert len(read_manifest(tmp_path / "a/manifest.jsonl")) == len(scenes) == 20
    assert _digest(tmp_path / "a") == _digest(tmp_path / "b")
    synth_dataset(SynthConfig(n_classes=2, scenes_per_class=10, segments_per_scene=3, seed=1), tmp_path / "c")
    assert _digest(tmp_path / "a") != _digest(tmp_path / "c")


def test_synth_images_load_in_range(tmp_path):
    scenes = synth_dataset(SynthConfig(scenes_per_class=2, segments_per_scene=1), tmp_path)
    for ref in scenes[0].refs():
        img = load_image(tmp_path / ref.image_path, 24)
        assert img.shape == (3, 24, 24) and np.all(np.abs(img) <= 1)


def test_template_oracle_recovers_clean_audio_classes(tmp_path):
    cfg = SynthConfig(n_classes=5, scenes_per_class=4, segments_per_scene=2, noise_level=0.0)
    scenes = synth_dataset(cfg, tmp_path)
    fe = dsp.TINY_FRONTEND

    def profile(samples):
        mel = dsp.log_mel_spectrogram(dsp.AudioSegment(samples, fe.sample_rate), fe).values.mean(axis=0)
        return (mel - mel.mean()) / mel.std()

    templates = [profile(synth_audio(k, fe.sample_rate, np.random.default_rng(0), n_classes=5)) for k in range(5)]
    correct = total = 0
    for scene in scenes:
        for ref in scene.refs():
            p = profile(dsp.read_wav(tmp_path / ref.audio_path).samples)
            guess = int(np.argmax([p @ t for t in templates]))
            correct += cfg.class_names[guess] == ref.class_label
            total += 1
    assert correct == total == 40


def test_synth_config_validation():
    with pytest.raises(ValueError):
        SynthConfig(scenes_per_class=0)
    with pytest.raises(ValueError):
        SynthConfig(n_classes=9)
