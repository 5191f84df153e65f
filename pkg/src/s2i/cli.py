"""``s2i`` command line: the whole pipeline as subcommands over one run directory.

Every subcommand accepts ``--config FILE`` and ``--<key> VALUE`` for any
configuration key.  Exit codes: 0 success, 1 runtime failure, 2 usage error.
Logs are ``key=value`` lines on standard error.
"""

from __future__ import annotations

import argparse
import logging
import subprocess
import sys
from pathlib import Path

import numpy as np

from . import __version__, data, dsp
from . import eval as ev
from .config import KEYS, ConfigError, RunConfig
from .diagnostics import format_table, gradient_suite
from .models import build_classifier, build_model, encode_audio, generate_image
from .nn import RngState
from .training import RunState, embedding_sweep, load_checkpoint, save_checkpoint, train_autoencoder, train_gan

log = logging.getLogger("s2i.cli")

COMMANDS = ("synth-data", "featurize", "train-ae", "train-gan", "sweep", "translate", "train-clf", "eval",
            "metrics", "describe", "gradcheck")


# -- run directory helpers -----------------------------------------------------


def version_string() -> str:
    try:
        described = subprocess.run(["git", "describe", "--always", "--dirty"], capture_output=True, text=True,
                                   cwd=Path(__file__).parent, timeout=5)
        if described.returncode == 0 and described.stdout.strip():
            return f"{__version__}+{described.stdout.strip()}"
    except (OSError, subprocess.SubprocessError):
        pass
    return __version__


def prepare_run(cfg: RunConfig, command: str) -> Path:
    run = cfg.run_path
    run.mkdir(parents=True, exist_ok=True)
    (run / "config.txt").write_text(cfg.dump())
    (run / "version.txt").write_text(version_string() + "\n")
    with open(run / "commands.log", "a") as fh:
        fh.write(command + "\n")
    return run


def class_names(cfg: RunConfig) -> list[str]:
    path = cfg.run_path / "features" / "classes.txt"
    if not path.exists():
        raise FileNotFoundError(f"{path} missing; run featurize first")
    return path.read_text().split()


def load_split(cfg: RunConfig, name: str) -> data.TripleSet:
    split = data.read_split(cfg.run_path / "splits" / f"{name}.jsonl", name)
    if not split.segments:
        raise ValueError(f"split {name!r} is empty")
    names = class_names(cfg)
    spec_dir = cfg.run_path / "features" / "spectrograms"
    specs = np.stack([dsp.read_spectrogram(spec_dir / f"{r.key}.s2is").values for r in split.segments])
    images = data.load_images(cfg.corpus_path, split.segments, cfg.schema().image_size)
    labels = np.array([names.index(r.class_label) for r in split.segments], dtype=np.int64)
    return data.TripleSet(specs.astype(np.float32), images, labels, list(split.segments), names)


def load_trained(cfg: RunConfig, f: int | None = None, gan: bool = True):
    schema = cfg.schema(f)
    nets = build_model(schema, cfg.seed)
    load_checkpoint(cfg.run_path / "ae" / "final.s2ic", {"encoder": nets.encoder, "decoder": nets.decoder})
    if gan:
        load_checkpoint(cfg.run_path / "gan" / "final.s2ic",
                        {"generator": nets.generator, "discriminator": nets.discriminator})
    return nets


# -- subcommands ---------------------------------------------------------------


def cmd_synth_data(cfg: RunConfig) -> int:
    out = cfg.run_path / "corpus"
    scenes = data.synth_dataset(cfg.synth(), out)
    n = sum(len(s.segments) for s in scenes)
    log.info("event=synth_data scenes=%d segments=%d out=%s", len(scenes), n, out)
    print(f"wrote {n} segments from {len(scenes)} scenes to {out}")
    return 0


def cmd_featurize(cfg: RunConfig) -> int:
    fe = cfg.frontend()
    corpus = cfg.corpus_path
    scenes = data.read_manifest(corpus / "manifest.jsonl")
    splits = data.build_splits(scenes, tuple(cfg.float_list("split_ratios")), cfg.split_seed)
    names = sorted({s.class_label for s in scenes})
    feat = cfg.run_path / "features"
    spec_dir = feat / "spectrograms"
    spec_dir.mkdir(parents=True, exist_ok=True)
    (cfg.run_path / "splits").mkdir(exist_ok=True)
    (feat / "classes.txt").write_text("\n".join(names) + "\n")
    raw = {name: data.featurize(corpus, split.segments, fe, cfg.jobs) for name, split in splits.items()}
    stats = dsp.compute_norm_stats(raw["train"])
    dsp.write_norm_stats(feat / "norm_stats.txt", stats)
    for name, split in splits.items():
        data.write_split(cfg.run_path / "splits" / f"{name}.jsonl", split)
        for ref, values in zip(split.segments, raw[name]):
            spec = dsp.normalize_spectrogram(dsp.Spectrogram(values), stats)
            dsp.write_spectrogram(spec_dir / f"{ref.key}.s2is", spec)
        log.info("event=featurize split=%s segments=%d classes=%s", name, len(split), split.class_counts())
    print(f"featurized {sum(len(s) for s in splits.values())} segments; stats min={stats.min:.4f} "
          f"max={stats.max:.4f}")
    return 0


def cmd_train_ae(cfg: RunConfig) -> int:
    train = load_split(cfg, "train")
    schema = cfg.schema()
    nets = build_model(schema, cfg.seed)
    result = train_autoencoder(train.spectrograms, schema, cfg.training(), cfg.run_path, nets)
    rows = result.ledger.epoch_rows
    print(f"autoencoder: {len(rows)} epochs, L_A {rows[0]['pixel']:.6f} -> {rows[-1]['pixel']:.6f}")
    return 0


def cmd_train_gan(cfg: RunConfig) -> int:
    train = load_split(cfg, "train")
    nets = load_trained(cfg, gan=False)
    result = train_gan(train.spectrograms, train.images, nets.encoder, nets.schema, cfg.training(), cfg.run_path,
                       nets, resume=cfg.resume or None)
    ledger = result.ledger
    print(f"gan: {ledger.g_updates} generator updates, {ledger.d_updates} discriminator updates")
    return 0


def _oracle_callback(cfg: RunConfig, train: data.TripleSet, test: data.TripleSet):
    oracle = ev.TemplateOracle.fit(train.images, train.labels, train.class_names)
    classifiers = {c: oracle.classifier(c) for c in train.class_names}

    def factory(f, encoder):
        def callback(epoch, generator):
            if not cfg.eval_every or epoch % cfg.eval_every:
                return {}
            report = ev.informativity_rate(generator, encoder, test.spectrograms, test.labels, test.class_names,
                                           classifiers, seed=cfg.dropout_seed, dropout=cfg.test_dropout)
            return {f"rate_{c}": r for c, r in report.per_class.items()}
        return callback

    return factory


def cmd_sweep(cfg: RunConfig) -> int:
    train, test = load_split(cfg, "train"), load_split(cfg, "test")
    dims = cfg.int_list("dims")
    if not dims:
        raise ConfigError("dims is empty")
    out = cfg.run_path / "sweep"
    runs = embedding_sweep(train.spectrograms, train.images, cfg.schema(), cfg.training(), dims, out,
                           _oracle_callback(cfg, train, test))
    failed = 0
    for f, run in runs.items():
        if run.error:
            failed += 1
            print(f"f={f}: FAILED {run.error}")
            continue
        metrics = run.gan.state.epoch_metrics
        cols = [f"rate_{c}" for c in train.class_names]
        lines = ["epoch," + ",".join(train.class_names)]
        lines += [f"{m['epoch']}," + ",".join(repr(float(m[c])) for c in cols) for m in metrics if cols[0] in m]
        (out / f"f{f}" / "rates.csv").write_text("\n".join(lines) + "\n")
        print(f"f={f}: {run.gan.ledger.g_updates} generator updates")
    return 1 if failed else 0


def _crop_to_segment(seg: dsp.AudioSegment) -> dsp.AudioSegment:
    n = seg.sample_rate
    if seg.samples.size < n:
        raise ValueError(f"sound is {seg.samples.size / n:.3f} s long; need at least 1 s")
    return dsp.AudioSegment(seg.samples[:n], seg.sample_rate)


def cmd_translate(cfg: RunConfig) -> int:
    if not cfg.sound:
        raise ConfigError("translate needs --sound PATH")
    if cfg.samples < 1:
        raise ConfigError("samples must be >= 1")
    fe = cfg.frontend()
    stats = dsp.read_norm_stats(cfg.run_path / "features" / "norm_stats.txt")
    seg = _crop_to_segment(dsp.read_wav(cfg.sound, expected_rate=fe.sample_rate))
    spec = dsp.normalize_spectrogram(dsp.log_mel_spectrogram(seg, fe), stats)
    nets = load_trained(cfg)
    x = encode_audio(nets.encoder, spec.values[None].astype(np.float32))
    out = cfg.run_path / "translate"
    out.mkdir(parents=True, exist_ok=True)
    stem = Path(cfg.sound).stem
    rng = RngState(cfg.dropout_seed)
    for i in range(cfg.samples):
        img = generate_image(nets.generator, x, "eval", rng, dropout=cfg.test_dropout)[0]
        data.save_png(out / f"{stem}_{i:02d}.png", img)
    (out / f"{stem}_embedding.txt").write_text("".join(f"{v!r}\n" for v in x[0].astype(float).tolist()))
    print(f"wrote {cfg.samples} images and the embedding to {out}")
    return 0


def _translator_checkpoints(cfg: RunConfig) -> list[Path]:
    gan_dir = cfg.run_path / "gan"
    paths = sorted((gan_dir / "checkpoints").glob("*.s2ic")) + [gan_dir / "final.s2ic"]
    return [p for p in paths if p.exists()]


def cmd_train_clf(cfg: RunConfig) -> int:
    train, val = load_split(cfg, "train"), load_split(cfg, "val")
    oracle = ev.TemplateOracle.fit(train.images, train.labels, train.class_names)
    nets = load_trained(cfg, gan=False)
    pools_images = {}
    for path in _translator_checkpoints(cfg):
        load_checkpoint(path, {"generator": nets.generator, "discriminator": nets.discriminator})
        imgs = [ev.translate(nets.generator, nets.encoder, val.spectrograms, seed=cfg.dropout_seed + s,
                             dropout=cfg.test_dropout) for s in range(cfg.samples)]
        pools_images[path.stem] = np.concatenate(imgs)
    if not pools_images:
        raise FileNotFoundError("no GAN checkpoints; run train-gan first")
    ccfg = ev.ClassifierConfig(cfg.clf_lr, cfg.clf_momentum, cfg.clf_weight_decay, cfg.clf_epochs,
                               cfg.clf_batch_size, seed=cfg.seed)
    out = cfg.run_path / "clf"
    out.mkdir(parents=True, exist_ok=True)
    rows = ["class,train_accuracy,test_accuracy,n_images"]
    for name in train.class_names:
        pools = {model: (imgs, oracle.classifier(name)(imgs)) for model, imgs in pools_images.items()}
        ds = ev.build_informativity_dataset(name, pools, cfg.clf_per_label, cfg.seed)
        result = ev.train_informativity_classifier(ds, cfg.schema(), ccfg)
        save_checkpoint(out / f"{name}.s2ic", {"classifier": result.model}, {}, RunState("clf"))
        rows.append(f"{name},{float(result.train_accuracy)!r},{float(result.test_accuracy)!r},{len(ds)}")
        print(f"{name}: held-out accuracy {result.test_accuracy:.3f} ({len(ds)} images, oracle labels)")
    (out / "accuracy.csv").write_text("\n".join(rows) + "\n")
    return 0


def cmd_eval(cfg: RunConfig) -> int:
    train, test = load_split(cfg, "train"), load_split(cfg, "test")
    nets = load_trained(cfg)
    oracle = ev.TemplateOracle.fit(train.images, train.labels, train.class_names)
    sources = {"oracle": {c: oracle.classifier(c) for c in train.class_names}}
    clf_dir = cfg.run_path / "clf"
    if all((clf_dir / f"{c}.s2ic").exists() for c in train.class_names):
        models = {}
        for c in train.class_names:
            model = build_classifier(cfg.schema(), cfg.seed)
            load_checkpoint(clf_dir / f"{c}.s2ic", {"classifier": model})
            models[c] = model
        sources["classifier"] = models
    out = cfg.run_path / "eval"
    out.mkdir(parents=True, exist_ok=True)
    lines = ["source,class,rate,informative,n"]
    for source, classifiers in sources.items():
        report = ev.informativity_rate(nets.generator, nets.encoder, test.spectrograms, test.labels,
                                       test.class_names, classifiers, seed=cfg.dropout_seed, dropout=cfg.test_dropout)
        for c, rate in report.per_class.items():
            hits, n = report.counts[c]
            lines.append(f"{source},{c},{float(rate)!r},{hits},{n}")
        lines.append(f"{source},average,{float(report.average)!r},,")
        print(f"{source}: average informativity {report.average:.3f} " +
              " ".join(f"{c}={r:.3f}" for c, r in report.per_class.items()))
    (out / "rates.csv").write_text("\n".join(lines) + "\n")
    images = ev.translate(nets.generator, nets.encoder, test.spectrograms, cfg.dropout_seed, cfg.test_dropout)
    stat, p = ev.permutation_test(oracle.scores(images), test.labels, cfg.permutations, cfg.seed)
    (out / "crossmodal.txt").write_text(f"statistic={float(stat)!r}\np={float(p)!r}\nn_sounds={len(test)}\n")
    print(f"crossmodal statistic {stat:.4f}, permutation p={p:.4g} over {len(test)} test sounds")
    return 0


def _read_loss_rows(path: Path) -> list[dict]:
    import csv
    with open(path, newline="") as fh:
        return list(csv.DictReader(fh))


def _read_rates(path: Path) -> dict[str, list[float]]:
    rows = _read_loss_rows(path)
    if not rows:
        return {}
    return {c: [float(r[c]) for r in rows] for c in rows[0] if c != "epoch"}


def cmd_metrics(cfg: RunConfig) -> int:
    ledgers, rates = {}, {}
    if (cfg.run_path / "gan" / "loss.csv").exists():
        ledgers[cfg.f] = _read_loss_rows(cfg.run_path / "gan" / "loss.csv")
    for fdir in sorted((cfg.run_path / "sweep").glob("f*")):
        f = int(fdir.name[1:])
        if (fdir / "gan" / "loss.csv").exists():
            ledgers[f] = _read_loss_rows(fdir / "gan" / "loss.csv")
        if (fdir / "rates.csv").exists():
            rates[f] = _read_rates(fdir / "rates.csv")
    if not ledgers and not rates:
        raise FileNotFoundError(f"no loss ledgers under {cfg.run_path}")
    n_epochs = max(len(rows) for rows in ledgers.values()) if ledgers else 0
    masked = ()
    if cfg.n_gd_unit == "epoch":
        d_epochs = range(cfg.n_gd, n_epochs + 1, cfg.n_gd)
        masked = ev.mask_epochs(d_epochs, cfg.int_list("mask_offsets"))
    avg_range = (cfg.avg_start, cfg.avg_end or max(n_epochs, 1))
    report = ev.emit_report(cfg.run_path / "report", ledgers, rates, cfg.window, masked, avg_range)
    for row in report.summary:
        print("f={} class={} general_avg={:.4f} max_ma={:.4f}".format(*row))
    print(f"wrote {len(report.files)} report files to {cfg.run_path / 'report'}")
    return 0


def cmd_describe(cfg: RunConfig) -> int:
    schema = cfg.schema()
    nets = build_model(schema, cfg.seed)
    networks = list(nets.items()) + [("classifier", build_classifier(schema, cfg.seed))]
    for name, net in networks:
        rows = net.describe()
        print(f"{name}: {net.num_params()} parameters, schema {net.schema_digest().hex()[:16]}")
        for layer, kind, n in rows:
            print(f"  {layer:<40} {kind:<18} {n}")
    return 0


def cmd_gradcheck(cfg: RunConfig) -> int:
    rows = gradient_suite(cfg.seed)
    print(format_table(rows))
    failed = [r.name for r in rows if not r.passed]
    if failed:
        log.error("event=gradcheck failed=%s", ",".join(failed))
        return 1
    return 0


HANDLERS = {
    "synth-data": cmd_synth_data, "featurize": cmd_featurize, "train-ae": cmd_train_ae,
    "train-gan": cmd_train_gan, "sweep": cmd_sweep, "translate": cmd_translate, "train-clf": cmd_train_clf,
    "eval": cmd_eval, "metrics": cmd_metrics, "describe": cmd_describe, "gradcheck": cmd_gradcheck,
}


# -- entry point ---------------------------------------------------------------


def build_parser() -> argparse.ArgumentParser:
    parser = argparse.ArgumentParser(prog="s2i", description="Sound-to-image translation pipeline.")
    parser.add_argument("--version", action="version", version=f"s2i {__version__}")
    common = argparse.ArgumentParser(add_help=False)
    common.add_argument("--config", help="flat key = value config file")
    common.add_argument("--log-level", default="INFO", choices=("DEBUG", "INFO", "WARNING", "ERROR"))
    for key, spec in KEYS.items():
        flags = [f"--{key.replace('_', '-')}"] + ([f"--{key}"] if "_" in key else [])
        common.add_argument(*flags, dest=f"cfg_{key}", default=None, metavar=spec.type.__name__.upper(),
                            help=spec.help or None)
    sub = parser.add_subparsers(dest="command", metavar="COMMAND", required=True)
    for name in COMMANDS:
        sub.add_parser(name, parents=[common], help=(HANDLERS[name].__doc__ or "").strip() or None)
    return parser


class _KeyValueFormatter(logging.Formatter):
    def format(self, record):
        return f"level={record.levelname.lower()} logger={record.name} {record.getMessage()}"


def _setup_logging(level: str) -> None:
    handler = logging.StreamHandler(sys.stderr)
    handler.setFormatter(_KeyValueFormatter())
    root = logging.getLogger("s2i")
    root.handlers[:] = [handler]
    root.setLevel(level)
    root.propagate = False


def _one_line(text: str) -> str:
    return " ".join(str(text).split()).replace('"', "'")


def main(argv=None) -> int:
    parser = build_parser()
    args = parser.parse_args(argv)  # exits 2 on usage errors
    _setup_logging(args.log_level)
    overrides = {k[4:]: v for k, v in vars(args).items() if k.startswith("cfg_") and v is not None}
    try:
        cfg = RunConfig.load(args.config, overrides)
        prepare_run(cfg, " ".join(["s2i"] + list(sys.argv[1:] if argv is None else argv)))
        return HANDLERS[args.command](cfg)
    except ConfigError as exc:
        print(f'error=config command={args.command} message="{_one_line(exc)}"', file=sys.stderr)
        return 2
    except Exception as exc:  # noqa: BLE001 - every failure becomes one parsable line
        print(f'error={type(exc).__name__} command={args.command} message="{_one_line(exc)}"', file=sys.stderr)
        log.debug("traceback", exc_info=True)
        return 1


if __name__ == "__main__":
    sys.exit(main())
