"""Two-phase training: audio autoencoder, then the embedding-conditioned GAN.

Both phases share one loop: epochs are shuffled permutations of the training
set drawn from the ``data`` RNG stream keyed by epoch number, and every
iteration is one mini-batch.  Run state (iteration, RNG counters, loss
history, partial-epoch accumulators) is checkpointed alongside the tensors
so a restored run continues exactly where it stopped.
"""

from __future__ import annotations

import csv
import hashlib
import io
import json
import logging
import math
from dataclasses import asdict, dataclass, field, fields
from pathlib import Path

import numpy as np

from . import losses
from .models import AudioDecoder, AudioEncoder, Discriminator, Generator, ModelSchema, Networks, build_model
from .nn import Context, Module, OptimizerState, RngState, read_tensors, schema_hash, sgd_step, write_tensors
from .nn.checkpoint import OPTIM_PREFIX

log = logging.getLogger(__name__)

LOSS_COLUMNS = ("epoch", "pixel", "adv", "ma_adv", "d_loss")
ITERATION_COLUMNS = ("iteration", "epoch", "d_update", "g_update", "n_real", "n_fake",
                     "pixel", "adv", "ma_adv", "d_loss", "rng_dropout")


@dataclass
class TrainingConfig:
    batch_size: int = 64
    ae_epochs: int = 200
    ae_lr: float = 0.05
    ae_momentum: float = 0.9
    gan_epochs: int = 500
    gan_iterations: int = 0
    g_lr: float = 0.1
    g_momentum: float = 0.5
    d_lr: float = 0.1
    d_momentum: float = 0.5
    weight_decay: float = 0.0
    n_gd: int = 5
    n_gd_unit: str = "iteration"
    lam: float = 0.1
    ma_k: int = 20
    r_max: float = 1.0
    r_min: float = -1.0
    seed: int = 0
    checkpoint_every: int = 0
    lr_decay_step: int = 0
    lr_decay_gamma: float = 0.5
    divergence_factor: float = 1e3
    verify_freezing: bool = False

    def __post_init__(self):
        if self.batch_size < 1:
            raise ValueError("batch_size must be >= 1")
        if self.n_gd < 1:
            raise ValueError("n_gd must be >= 1")
        if self.lam < 0:
            raise ValueError("lam must be >= 0")
        if self.n_gd_unit not in ("iteration", "epoch"):
            raise ValueError("n_gd_unit must be 'iteration' or 'epoch'")
        losses.ScoreTargets(self.r_max, self.r_min)
        losses.AdvLossHistory(self.ma_k)

    def to_dict(self) -> dict:
        return asdict(self)


class TrainingAborted(RuntimeError):
    def __init__(self, message: str, checkpoint: Path | None = None):
        super().__init__(f"{message} (last good checkpoint: {checkpoint})" if checkpoint else message)
        self.checkpoint = checkpoint


class FrozenParameterError(RuntimeError):
    pass


def param_digest(module: Module) -> str:
    """SHA-256 over every parameter and buffer, in name order."""
    h = hashlib.sha256()
    for name, value in sorted(module.state_dict().items()):
        h.update(name.encode())
        h.update(np.ascontiguousarray(value).tobytes())
    return h.hexdigest()


def _fmt(value) -> str:
    if value is None or (isinstance(value, float) and math.isnan(value)):
        return ""
    return repr(float(value)) if isinstance(value, (float, np.floating)) else str(value)


def write_csv(path, columns, rows, header_lines=()) -> None:
    buf = io.StringIO()
    for line in header_lines:
        buf.write(f"# {line}\n")
    writer = csv.writer(buf, lineterminator="\n")
    writer.writerow(columns)
    for row in rows:
        writer.writerow([_fmt(row.get(c)) for c in columns])
    Path(path).write_text(buf.getvalue())


def loss_csv_text(rows) -> str:
    buf = io.StringIO()
    writer = csv.writer(buf, lineterminator="\n")
    writer.writerow(LOSS_COLUMNS)
    for row in rows:
        writer.writerow([_fmt(row.get(c)) for c in LOSS_COLUMNS])
    return buf.getvalue()


@dataclass
class RunState:
    """Everything beyond tensors needed to resume a run bit-for-bit."""

    phase: str
    iteration: int = 0
    rng: dict = field(default_factory=dict)
    history: list[float] = field(default_factory=list)
    epoch_acc: dict = field(default_factory=dict)
    epoch_rows: list[dict] = field(default_factory=list)
    records: list[dict] = field(default_factory=list)
    first_epoch: dict = field(default_factory=dict)
    d_updates: int = 0
    g_updates: int = 0
    epoch_metrics: list[dict] = field(default_factory=list)


@dataclass
class Ledger:
    phase: str
    config: dict
    epoch_rows: list[dict]
    records: list[dict]
    d_updates: int = 0
    g_updates: int = 0
    checkpoints: list[str] = field(default_factory=list)

    def loss_csv(self) -> str:
        return loss_csv_text(self.epoch_rows)

    def write(self, out_dir) -> None:
        out = Path(out_dir)
        out.mkdir(parents=True, exist_ok=True)
        (out / "loss.csv").write_text(self.loss_csv())
        header = [f"{k}={v}" for k, v in sorted(self.config.items())]
        write_csv(out / "ledger.csv", ITERATION_COLUMNS, self.records, header)


# -- checkpoints -------------------------------------------------------------


def _combined_digest(networks: dict[str, Module]) -> bytes:
    return schema_hash({name: net.schema_digest().hex() for name, net in sorted(networks.items())})


def save_checkpoint(path, networks: dict[str, Module], optimizers: dict[str, OptimizerState],
                    state: RunState, extra: dict | None = None) -> Path:
    """Write ``path`` (S2IC tensors) and ``path.json`` (run state)."""
    path = Path(path)
    path.parent.mkdir(parents=True, exist_ok=True)
    tensors = {}
    for name, net in networks.items():
        for key, value in net.state_dict().items():
            tensors[f"{name}/{key}"] = value
    for name, opt in optimizers.items():
        for key, value in opt.velocity.items():
            tensors[f"{OPTIM_PREFIX}{name}/{key}"] = value
    write_tensors(path, tensors, _combined_digest(networks))
    meta = {"state": asdict(state),
            "optimizers": {n: {"learning_rate": o.learning_rate, "momentum": o.momentum,
                               "weight_decay": o.weight_decay, "steps": o.steps} for n, o in optimizers.items()},
            **(extra or {})}
    Path(str(path) + ".json").write_text(json.dumps(meta, sort_keys=True))
    return path


def load_checkpoint(path, networks: dict[str, Module], optimizers: dict[str, OptimizerState] | None = None):
    """Restore tensors into ``networks`` (and optimizer velocities); return the run state.

    Raises :class:`~s2i.nn.SchemaMismatchError` if the networks' schemas differ
    from the ones that were saved.
    """
    _, tensors = read_tensors(path, expected_hash=_combined_digest(networks))
    for name, net in networks.items():
        prefix = f"{name}/"
        net.load_state_dict({k[len(prefix):]: v for k, v in tensors.items() if k.startswith(prefix)})
    meta = json.loads(Path(str(path) + ".json").read_text())
    for name, opt in (optimizers or {}).items():
        prefix = f"{OPTIM_PREFIX}{name}/"
        opt.velocity = {k[len(prefix):]: v.copy() for k, v in tensors.items() if k.startswith(prefix)}
        saved = meta["optimizers"][name]
        opt.steps = saved["steps"]
    state = RunState(**meta["state"])
    return state, meta


# -- shared loop helpers -----------------------------------------------------


def _batches_per_epoch(n: int, b: int) -> int:
    if n < 1:
        raise ValueError("training set is empty")
    return max(1, n // b)


def _batch_indices(rng: RngState, epoch: int, n: int, b: int, j: int) -> np.ndarray:
    perm = rng.peek("data", epoch).permutation(n)
    b = min(b, n)
    return perm[j * b:(j + 1) * b]


def _lr(base: float, cfg: TrainingConfig, epoch: int) -> float:
    if cfg.lr_decay_step > 0:
        return base * cfg.lr_decay_gamma ** ((epoch - 1) // cfg.lr_decay_step)
    return base


def _acc_add(acc: dict, key: str, value) -> None:
    if value is None:
        return
    s, c = acc.get(key, (0.0, 0))
    acc[key] = (s + float(value), c + 1)


def _acc_mean(acc: dict, key: str):
    s, c = acc.get(key, (0.0, 0))
    return s / c if c else None


def _check_finite(value: float, what: str, checkpoint) -> None:
    if not math.isfinite(value):
        raise TrainingAborted(f"non-finite {what} loss", checkpoint)


def _check_divergence(state: RunState, row: dict, cfg: TrainingConfig, checkpoint) -> None:
    for key in ("pixel", "d_loss"):
        value = row.get(key)
        if value is None:
            continue
        ref = state.first_epoch.setdefault(key, value)
        if ref > 0 and value > cfg.divergence_factor * ref:
            raise TrainingAborted(f"{key} loss {value:.4g} exceeds {cfg.divergence_factor:g}x its "
                                  f"epoch-1 value {ref:.4g}", checkpoint)


def _checkpoint_path(run_dir, phase: str, iteration: int) -> Path:
    return Path(run_dir) / phase / "checkpoints" / f"iter_{iteration:07d}.s2ic"


# -- phase 1: autoencoder ----------------------------------------------------


@dataclass
class AutoencoderResult:
    encoder: AudioEncoder
    decoder: AudioDecoder
    ledger: Ledger


def train_autoencoder(spectrograms: np.ndarray, schema: ModelSchema, cfg: TrainingConfig,
                      run_dir=None, nets: Networks | None = None, resume=None,
                      stop_after: int | None = None) -> AutoencoderResult:
    """Minimize the spectrogram reconstruction MSE of A_D(A_E(S))."""
    specs = np.asarray(spectrograms, dtype=np.float32)
    rng = RngState(cfg.seed)
    if nets is None:
        nets = build_model(schema, rng)
    enc, dec = nets.encoder, nets.decoder
    networks = {"encoder": enc, "decoder": dec}
    opts = {name: OptimizerState(cfg.ae_lr, cfg.ae_momentum, cfg.weight_decay) for name in networks}
    state = RunState("ae", rng=rng.state())
    if resume is not None:
        state, _ = load_checkpoint(resume, networks, opts)
        rng = RngState.from_state(state.rng)

    n, b = len(specs), cfg.batch_size
    nb = _batches_per_epoch(n, b)
    total = cfg.ae_epochs * nb
    end = total if stop_after is None else min(total, stop_after)
    last_ckpt = Path(resume) if resume else None

    while state.iteration < end:
        epoch, j = state.iteration // nb + 1, state.iteration % nb
        idx = _batch_indices(rng, epoch, n, b, j)
        S = specs[idx]
        dropout_pos = rng.counters["dropout"]
        ctx = Context(train=True, rng=rng)
        x, enc_cache = enc.forward(S, ctx)
        S_hat, dec_cache = dec.forward(x, ctx)
        loss = losses.pixel_loss_spec(S, S_hat)
        _check_finite(loss, "autoencoder", last_ckpt)
        dS_hat = losses.pixel_loss_spec_grad(S, S_hat)
        dx, dec_grads = dec.backward(dS_hat, dec_cache)
        _, enc_grads = enc.backward(dx, enc_cache)
        for name, grads in (("encoder", enc_grads), ("decoder", dec_grads)):
            opts[name].learning_rate = _lr(cfg.ae_lr, cfg, epoch)
            sgd_step(dict(networks[name].named_params()), grads, opts[name])
        state.iteration += 1
        state.g_updates += 1
        _acc_add(state.epoch_acc, "pixel", loss)
        state.records.append({"iteration": state.iteration, "epoch": epoch, "d_update": 0, "g_update": 1,
                              "pixel": loss, "rng_dropout": dropout_pos})
        if j == nb - 1:
            row = {"epoch": epoch, "pixel": _acc_mean(state.epoch_acc, "pixel")}
            state.epoch_rows.append(row)
            state.epoch_acc = {}
            _check_divergence(state, row, cfg, last_ckpt)
            log.info("phase=ae epoch=%d pixel=%.6f", epoch, row["pixel"])
        state.rng = rng.state()
        if run_dir is not None and cfg.checkpoint_every and state.iteration % cfg.checkpoint_every == 0:
            last_ckpt = save_checkpoint(_checkpoint_path(run_dir, "ae", state.iteration), networks, opts, state,
                                        {"config": cfg.to_dict(), "schema": schema.to_dict()})

    ledger = Ledger("ae", cfg.to_dict(), state.epoch_rows, state.records, 0, state.g_updates)
    if run_dir is not None:
        final = save_checkpoint(Path(run_dir) / "ae" / "final.s2ic", networks, opts, state,
                                {"config": cfg.to_dict(), "schema": schema.to_dict()})
        ledger.checkpoints.append(str(final))
        ledger.write(Path(run_dir) / "ae")
    return AutoencoderResult(enc, dec, ledger)


# -- phase 2: GAN ------------------------------------------------------------


@dataclass
class GanResult:
    generator: Generator
    discriminator: Discriminator
    ledger: Ledger
    state: RunState


def is_discriminator_iteration(iteration: int, epoch: int, cfg: TrainingConfig) -> bool:
    """``iteration`` and ``epoch`` are 1-based."""
    if cfg.n_gd_unit == "epoch":
        return epoch % cfg.n_gd == 0
    return iteration % cfg.n_gd == 0


def train_gan(spectrograms: np.ndarray, images: np.ndarray, encoder: AudioEncoder, schema: ModelSchema,
              cfg: TrainingConfig, run_dir=None, nets: Networks | None = None, resume=None,
              stop_after: int | None = None, epoch_callback=None) -> GanResult:
    """Adversarial phase with the audio encoder frozen.

    Every ``n_gd``-th iteration D is updated on one batch of ``b`` real and
    ``b`` synthetic images (G frozen); every iteration G is updated on the pixel loss plus
    ``lam`` times the moving-average adversarial loss (D frozen).

    ``epoch_callback(epoch, generator)`` may return a dict of per-epoch
    metrics; it must not touch the training RNG.
    """
    specs = np.asarray(spectrograms, dtype=np.float32)
    images = np.asarray(images, dtype=np.float32)
    if len(specs) != len(images):
        raise ValueError(f"{len(specs)} spectrograms but {len(images)} images")
    rng = RngState(cfg.seed + 1)
    if nets is None:
        nets = build_model(schema, RngState(cfg.seed))
    gen, dis = nets.generator, nets.discriminator
    if gen.schema.f != encoder.schema.f:
        raise ValueError(f"encoder f={encoder.schema.f} does not match generator f={gen.schema.f}")
    networks = {"generator": gen, "discriminator": dis}
    opts = {"generator": OptimizerState(cfg.g_lr, cfg.g_momentum, cfg.weight_decay),
            "discriminator": OptimizerState(cfg.d_lr, cfg.d_momentum, cfg.weight_decay)}
    state = RunState("gan", rng=rng.state())
    if resume is not None:
        state, _ = load_checkpoint(resume, networks, opts)
        rng = RngState.from_state(state.rng)
    history = losses.AdvLossHistory(cfg.ma_k, list(state.history))
    targets = losses.ScoreTargets(cfg.r_max, cfg.r_min)

    encoder_digest = param_digest(encoder)
    embeddings = encoder(specs, Context(train=False, dropout=False))
    if param_digest(encoder) != encoder_digest:
        raise FrozenParameterError("audio encoder parameters changed while computing embeddings")

    n, b = len(specs), cfg.batch_size
    nb = _batches_per_epoch(n, b)
    total = cfg.gan_iterations or cfg.gan_epochs * nb
    end = total if stop_after is None else min(total, stop_after)
    last_ckpt = Path(resume) if resume else None
    extra = {"config": cfg.to_dict(), "schema": schema.to_dict()}
    g_params, d_params = dict(gen.named_params()), dict(dis.named_params())

    while state.iteration < end:
        iteration = state.iteration + 1
        epoch, j = state.iteration // nb + 1, state.iteration % nb
        idx = _batch_indices(rng, epoch, n, b, j)
        x, Y = embeddings[idx], images[idx]
        dropout_pos = rng.counters["dropout"]
        record = {"iteration": iteration, "epoch": epoch, "d_update": 0, "g_update": 1, "rng_dropout": dropout_pos}

        if is_discriminator_iteration(iteration, epoch, cfg):
            g_before = param_digest(gen) if cfg.verify_freezing else None
            fake = gen(x, Context(train=True, rng=rng, update_stats=False))
            # one balanced batch: batch-norm statistics then cannot tell the halves apart
            r, d_cache = dis.forward((np.concatenate([Y, fake]), np.concatenate([x, x])), Context(train=True, rng=rng))
            r_real, r_fake = r[:len(Y)], r[len(Y):]
            d_loss = losses.score_loss(targets.r_max, r_real) + losses.score_loss(targets.r_min, r_fake)
            _check_finite(d_loss, "discriminator", last_ckpt)
            dr = np.concatenate([losses.score_loss_grad(targets.r_max, r_real),
                                 losses.score_loss_grad(targets.r_min, r_fake)])
            _, d_grads = dis.backward(dr, d_cache)
            opts["discriminator"].learning_rate = _lr(cfg.d_lr, cfg, epoch)
            sgd_step(d_params, d_grads, opts["discriminator"])
            if g_before is not None and param_digest(gen) != g_before:
                raise FrozenParameterError("generator changed during a discriminator update")
            state.d_updates += 1
            record.update(d_update=1, n_real=len(Y), n_fake=len(fake), d_loss=d_loss)
            _acc_add(state.epoch_acc, "d_loss", d_loss)

        d_before = param_digest(dis) if cfg.verify_freezing else None
        Y_hat, g_cache = gen.forward(x, Context(train=True, rng=rng))
        pixel = losses.pixel_loss_img(Y, Y_hat)
        # D sees the same real/synthetic mix it is trained on; only the synthetic half carries loss
        r_all, d_cache = dis.forward((np.concatenate([Y, Y_hat]), np.concatenate([x, x])),
                                     Context(train=True, rng=rng, update_stats=False))
        r_hat = r_all[len(Y):]
        adv = losses.adv_loss(targets.r_max, r_hat)
        ma_adv = losses.ma_adv_loss(adv, history, epoch)
        total_loss = losses.generator_total_loss(pixel, ma_adv, cfg.lam)
        _check_finite(total_loss, "generator", last_ckpt)
        dr = np.zeros_like(r_all)
        dr[len(Y):] = losses.adv_loss_grad(targets.r_max, r_hat) * np.float32(cfg.lam * losses.ma_adv_scale(history, epoch))
        (dimg, _), _ = dis.backward(dr, d_cache)
        dY_adv = dimg[len(Y):]
        dY = losses.pixel_loss_img_grad(Y, Y_hat) + dY_adv
        _, g_grads = gen.backward(dY, g_cache)
        opts["generator"].learning_rate = _lr(cfg.g_lr, cfg, epoch)
        sgd_step(g_params, g_grads, opts["generator"])
        if d_before is not None and param_digest(dis) != d_before:
            raise FrozenParameterError("discriminator changed during a generator update")
        state.g_updates += 1
        record.update(pixel=pixel, adv=adv, ma_adv=ma_adv)
        for key in ("pixel", "adv", "ma_adv"):
            _acc_add(state.epoch_acc, key, record[key])
        state.records.append(record)
        state.iteration = iteration

        if j == nb - 1:
            row = {"epoch": epoch, **{k: _acc_mean(state.epoch_acc, k) for k in ("pixel", "adv", "ma_adv", "d_loss")}}
            state.epoch_rows.append(row)
            history.append(row["adv"])
            state.epoch_acc = {}
            _check_divergence(state, row, cfg, last_ckpt)
            if epoch_callback is not None:
                state.epoch_metrics.append({"epoch": epoch, **(epoch_callback(epoch, gen) or {})})
            log.info("phase=gan epoch=%d pixel=%.6f adv=%.6f d_loss=%s", epoch, row["pixel"], row["adv"],
                     row["d_loss"])
        state.history = list(history.epoch_means)
        state.rng = rng.state()
        if run_dir is not None and cfg.checkpoint_every and iteration % cfg.checkpoint_every == 0:
            last_ckpt = save_checkpoint(_checkpoint_path(run_dir, "gan", iteration), networks, opts, state, extra)

    if param_digest(encoder) != encoder_digest:
        raise FrozenParameterError("audio encoder parameters changed during GAN training")
    ledger = Ledger("gan", cfg.to_dict(), state.epoch_rows, state.records, state.d_updates, state.g_updates)
    if run_dir is not None:
        final = save_checkpoint(Path(run_dir) / "gan" / "final.s2ic", networks, opts, state, extra)
        ledger.checkpoints.append(str(final))
        ledger.write(Path(run_dir) / "gan")
    return GanResult(gen, dis, ledger, state)


# -- embedding-dimension sweep ------------------------------------------------


@dataclass
class SweepRun:
    f: int
    autoencoder: AutoencoderResult | None = None
    gan: GanResult | None = None
    error: str | None = None


def embedding_sweep(train_specs: np.ndarray, train_images: np.ndarray, base_schema: ModelSchema,
                    cfg: TrainingConfig, dims, run_dir=None, callback_factory=None) -> dict[int, SweepRun]:
    """Train one autoencoder + GAN per embedding dimension; failures don't stop later dims.

    ``callback_factory(f, encoder)`` builds the GAN's per-epoch callback.
    """
    dims = sorted(set(int(d) for d in dims))
    if not dims:
        raise ValueError("no embedding dimensions given")
    results = {}
    for f in dims:
        schema = base_schema.with_f(f)
        out = None if run_dir is None else Path(run_dir) / f"f{f}"
        run = SweepRun(f)
        try:
            nets = build_model(schema, RngState(cfg.seed))
            run.autoencoder = train_autoencoder(train_specs, schema, cfg, out, nets)
            callback = callback_factory(f, run.autoencoder.encoder) if callback_factory else None
            run.gan = train_gan(train_specs, train_images, run.autoencoder.encoder, schema, cfg, out, nets,
                                epoch_callback=callback)
        except Exception as exc:  # noqa: BLE001 - recorded per dimension, sweep continues
            run.error = f"{type(exc).__name__}: {exc}"
            log.error("phase=sweep f=%d error=%r", f, run.error)
        results[f] = run
    return results


def config_fields() -> list[str]:
    return [f.name for f in fields(TrainingConfig)]
