"""Walk a pure tone and a synthetic class sound through the audio front end.

Run: python demos/frontend_tour.py [out_dir]
Writes a PNG rendering of each log-Mel spectrogram and prints where the
energy lands.
"""

import sys
from pathlib import Path

import numpy as np
from PIL import Image

from s2i import dsp
from s2i.data import synth_audio


def to_png(spec: dsp.Spectrogram, path: Path) -> None:
    v = spec.values.T[::-1]  # mel bands bottom-up
    v = (v - v.min()) / max(v.max() - v.min(), 1e-12)
    Image.fromarray((v * 255).astype(np.uint8)).resize((v.shape[1] * 4, v.shape[0] * 4)).save(path)


def main(out: Path) -> None:
    out.mkdir(parents=True, exist_ok=True)
    ref = dsp.REFERENCE_FRONTEND
    centers = dsp.mel_center_frequencies(ref)

    t = np.arange(ref.sample_rate) / ref.sample_rate
    tone = dsp.AudioSegment(0.5 * np.sin(2 * np.pi * 1000.0 * t), ref.sample_rate)
    spec = dsp.log_mel_spectrogram(tone, ref)
    band = int(np.argmax(spec.values.mean(axis=0)))
    print(f"1 kHz tone -> {spec.shape[0]}x{spec.shape[1]} log-Mel, peak band {band} "
          f"(centre {centers[band]:.0f} Hz)")
    to_png(spec, out / "tone_1khz.png")

    tiny = dsp.TINY_FRONTEND
    specs = []
    for k in range(3):
        audio = synth_audio(k, tiny.sample_rate, np.random.default_rng(k), noise_level=0.05, n_classes=3)
        specs.append(dsp.log_mel_spectrogram(dsp.AudioSegment(audio, tiny.sample_rate), tiny))
    stats = dsp.compute_norm_stats([s.values for s in specs])
    print(f"tiny profile: {specs[0].shape}, log range [{stats.min:.2f}, {stats.max:.2f}]")
    for k, spec in enumerate(specs):
        norm = dsp.normalize_spectrogram(spec, stats)
        print(f"  class {k}: strongest band {int(np.argmax(spec.values.mean(axis=0)))}, "
              f"normalized mean {norm.values.mean():+.3f}")
        to_png(norm, out / f"synth_class{k}.png")
    print(f"images in {out}")


if __name__ == "__main__":
    main(Path(sys.argv[1] if len(sys.argv) > 1 else "demo_out/frontend"))
