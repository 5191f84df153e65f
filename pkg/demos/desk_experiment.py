"""A small end-to-end sound-to-image experiment through the Python API.

Run: python demos/desk_experiment.py [gan_epochs]

Synthesizes a two-class corpus, trains the audio autoencoder, then the
conditional GAN with the encoder frozen, and asks whether translations of
held-out sounds look more like their own class than the other one.  With the
default 150 GAN epochs this takes a few minutes on one CPU core.
"""

import sys
import tempfile
import time

import numpy as np

from s2i import data, dsp, models, training
from s2i import eval as ev
from s2i.nn import RngState


def main(gan_epochs: int) -> None:
    synth = data.SynthConfig(n_classes=2, scenes_per_class=12, segments_per_scene=5, noise_level=0.1, seed=3)
    fe = dsp.TINY_FRONTEND
    schema = models.ModelSchema.tiny(16)
    with tempfile.TemporaryDirectory() as root:
        scenes = data.synth_dataset(synth, root)
        splits = data.build_splits(scenes, ratios=(0.5, 0.0, 0.5), seed=0)
        stats = dsp.compute_norm_stats(data.featurize(root, splits["train"].segments, fe))
        train = data.load_triples(root, splits["train"], fe, stats, schema.image_size, synth.class_names)
        test = data.load_triples(root, splits["test"], fe, stats, schema.image_size, synth.class_names)
    print(f"corpus: {len(train)} train / {len(test)} test pairs, scene-disjoint")

    cfg = training.TrainingConfig(batch_size=16, ae_epochs=100, gan_epochs=gan_epochs, seed=0)
    nets = models.build_model(schema, 0)
    oracle = ev.TemplateOracle.fit(train.images, train.labels, train.class_names)

    before = ev.translate(nets.generator, nets.encoder, test.spectrograms, seed=1)
    stat, p = ev.permutation_test(oracle.scores(before), test.labels, 500)
    print(f"untrained translator: statistic {stat:+.3f}, p={p:.3f}")

    t0 = time.time()
    ae = training.train_autoencoder(train.spectrograms, schema, cfg, nets=nets)
    rows = ae.ledger.epoch_rows
    print(f"autoencoder: L_A {rows[0]['pixel']:.3f} -> {rows[-1]['pixel']:.3f} ({time.time() - t0:.0f} s)")

    t0 = time.time()
    gan = training.train_gan(train.spectrograms, train.images, ae.encoder, schema, cfg, nets=nets)
    last = gan.ledger.epoch_rows[-1]
    print(f"gan: {gan.ledger.g_updates} G / {gan.ledger.d_updates} D updates, final pixel {last['pixel']:.3f} "
          f"({time.time() - t0:.0f} s)")

    after = ev.translate(gan.generator, ae.encoder, test.spectrograms, seed=1)
    stat, p = ev.permutation_test(oracle.scores(after), test.labels, 2000)
    print(f"trained translator: statistic {stat:+.3f}, p={p:.4f}")
    rates = ev.rate_from_labels({c: oracle.classifier(c)(after[test.labels == k])
                                 for k, c in enumerate(test.class_names)})
    print("oracle informativity: " + ", ".join(f"{c}={r:.2f}" for c, r in rates.per_class.items()))

    x = models.encode_audio(ae.encoder, test.spectrograms[:1])
    rng = np.random.default_rng(0)
    draws = [models.generate_image(gan.generator, x, rng=RngState(int(rng.integers(1 << 30))))
             for _ in range(2)]
    print(f"two dropout draws of one sound differ by {np.abs(draws[0] - draws[1]).mean():.3f} per pixel")


if __name__ == "__main__":
    main(int(sys.argv[1]) if len(sys.argv) > 1 else 150)
