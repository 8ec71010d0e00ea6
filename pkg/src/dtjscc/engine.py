"""End-to-end training, channel evaluation and checkpoint persistence."""
from __future__ import annotations

import csv
import dataclasses
import hashlib
import io
import logging
import math
import struct
import time
import zlib
from dataclasses import dataclass, field
from pathlib import Path

import numpy as np

from . import codec
from .codec import Codebook
from .data import Dataset, SyntheticSpec, batches, load_mnist, synthetic_blobs
from .diffcore import (AdamState, GradientTape, Layer, MlpParams, adam_step, backward,
                       forward_mlp, softmax_cross_entropy, strict_mode)
from .errors import ConfigError, FormatError, NumericError, StructuralError, VersionError
from .modem import extended_channel, psnr_to_sigma2, transition_matrix
from .objective import channel_entropy_of_sample, vrib_gradient_weights, vrib_loss

log = logging.getLogger(__name__)

FORMAT_VERSION = 1
MAGIC_PREFIX = b"DTJSCC"


@dataclass(frozen=True)
class TauSchedule:
    initial: float = 1.0
    floor: float = 0.5
    rate: float = 0.03


def tau_at(schedule: TauSchedule, epoch: int) -> float:
    """Exponentially annealed Gumbel-softmax temperature, clipped at the floor."""
    if epoch < 0:
        raise ValueError("epoch must be non-negative")
    return max(schedule.floor, schedule.initial * math.exp(-schedule.rate * epoch))


def _parse_ints(text: str) -> tuple[int, ...]:
    text = text.strip()
    return tuple(int(t) for t in text.split(",") if t.strip()) if text else ()


@dataclass(frozen=True)
class TrainConfig:
    d: int = 16
    K: int = 16
    D: int = 64
    beta: float = 1e-3
    tau_initial: float = 1.0
    tau_floor: float = 0.5
    tau_rate: float = 0.03
    psnr_train_db: float = 12.0
    epochs: int = 30
    batch_size: int = 128
    mc_draws: int = 1
    lr: float = 1e-3
    adam_beta1: float = 0.9
    adam_beta2: float = 0.999
    adam_eps: float = 1e-8
    seed: int = 0
    dataset: str = "mnist"
    data_dir: str = "/root/data/mnist"
    encoder_activation: str = "identity"
    inference_hidden: tuple[int, ...] = (1024, 256)
    codebook_scale: float = 1.0
    eval_trials: int = 10
    synthetic_classes: int = 10
    synthetic_width: int = 32
    synthetic_noise_std: float = 0.05
    synthetic_per_class: int = 500
    synthetic_seed: int = 0

    def __post_init__(self):
        if self.d < 1 or self.D < 1 or self.K < 2:
            raise ConfigError("need d >= 1, D >= 1, K >= 2")
        if self.beta < 0:
            raise ConfigError("beta must be non-negative")
        if self.batch_size < 1 or self.mc_draws < 1 or self.epochs < 0:
            raise ConfigError("batch_size and mc_draws must be >= 1, epochs >= 0")
        if self.dataset not in ("mnist", "synthetic"):
            raise ConfigError(f"unknown dataset {self.dataset!r}")
        if not 0 < self.tau_floor <= self.tau_initial:
            raise ConfigError("need 0 < tau_floor <= tau_initial")

    @classmethod
    def synthetic(cls, **changes) -> "TrainConfig":
        """Desk-scale preset for the Gaussian-blob dataset (seconds per run)."""
        preset = dict(dataset="synthetic", d=8, K=8, D=8, epochs=20, batch_size=64,
                      inference_hidden=(64,))
        preset.update(changes)
        return cls(**preset)

    @property
    def tau_schedule(self) -> TauSchedule:
        return TauSchedule(self.tau_initial, self.tau_floor, self.tau_rate)

    @property
    def feature_width(self) -> int:
        return self.d * self.D

    def replace(self, **changes) -> "TrainConfig":
        return dataclasses.replace(self, **changes)

    def to_text(self) -> str:
        lines = []
        for f in dataclasses.fields(self):
            v = getattr(self, f.name)
            if isinstance(v, tuple):
                v = ",".join(str(i) for i in v)
            elif isinstance(v, float):
                v = repr(v)
            lines.append(f"{f.name} = {v}")
        return "\n".join(lines) + "\n"

    @classmethod
    def from_text(cls, text: str, base: "TrainConfig | None" = None) -> "TrainConfig":
        """Parse ``key = value`` lines; ``#`` starts a comment; unknown keys are fatal."""
        base = base or cls()
        types = {f.name: f.type for f in dataclasses.fields(cls)}
        changes = {}
        for lineno, raw in enumerate(text.splitlines(), 1):
            line = raw.split("#", 1)[0].strip()
            if not line:
                continue
            if "=" not in line:
                raise ConfigError(f"line {lineno}: expected 'key = value'")
            key, value = (s.strip() for s in line.split("=", 1))
            if key not in types:
                raise ConfigError(f"line {lineno}: unknown key {key!r}")
            changes[key] = _coerce(key, types[key], value)
        return dataclasses.replace(base, **changes)

    @classmethod
    def from_file(cls, path) -> "TrainConfig":
        return cls.from_text(Path(path).read_text(encoding="utf-8"))

    def config_hash(self) -> str:
        return hashlib.sha256(self.to_text().encode()).hexdigest()[:12]


def _coerce(key, typ, value: str):
    try:
        if typ in ("int", int):
            return int(value)
        if typ in ("float", float):
            return float(value)
        if "tuple" in str(typ):
            return _parse_ints(value)
        return value
    except ValueError as exc:
        raise ConfigError(f"bad value for {key}: {value!r}") from exc


def load_datasets(config: TrainConfig) -> tuple[Dataset, Dataset]:
    """(train, test) splits selected by the config."""
    if config.dataset == "mnist":
        return load_mnist(config.data_dir, "train"), load_mnist(config.data_dir, "test")
    spec = SyntheticSpec(config.synthetic_classes, config.synthetic_width,
                         config.synthetic_noise_std, config.synthetic_per_class,
                         config.synthetic_seed)
    return synthetic_blobs(spec, "train"), synthetic_blobs(spec, "test")


@dataclass
class Model:
    encoder: MlpParams
    codebook: Codebook
    inference: MlpParams

    def arrays(self) -> list[np.ndarray]:
        return self.encoder.arrays() + [self.codebook.M] + self.inference.arrays()


def build_model(config: TrainConfig, input_width: int, class_count: int,
                rng: np.random.Generator) -> Model:
    encoder = MlpParams.init([input_width, config.feature_width], [config.encoder_activation], rng)
    codebook = Codebook.init(config.D, config.K, rng, scale=config.codebook_scale)
    sizes = [config.feature_width, *config.inference_hidden, class_count]
    acts = ["relu"] * len(config.inference_hidden) + ["identity"]
    inference = MlpParams.init(sizes, acts, rng)
    return Model(encoder, codebook, inference)


@dataclass
class Checkpoint:
    config: TrainConfig
    encoder: MlpParams
    inference: MlpParams
    codebook: Codebook
    final_tau: float
    metrics: dict[str, float] = field(default_factory=dict)
    version: int = FORMAT_VERSION

    @property
    def model(self) -> Model:
        return Model(self.encoder, self.codebook, self.inference)

    @property
    def input_width(self) -> int:
        return self.encoder.in_dim

    @property
    def class_count(self) -> int:
        return self.inference.out_dim


METRIC_FIELDS = ("epoch", "distortion", "channel_entropy_term", "encoder_entropy_term", "beta",
                 "total", "train_accuracy", "tau", "wall_clock_s")


@dataclass
class MetricsLog:
    rows: list[dict] = field(default_factory=list)

    def append(self, row: dict):
        if self.rows and row["epoch"] <= self.rows[-1]["epoch"]:
            raise StructuralError("epochs must be strictly increasing")
        self.rows.append(row)

    def column(self, name: str) -> list:
        return [r[name] for r in self.rows]

    def to_csv(self) -> str:
        buf = io.StringIO()
        w = csv.writer(buf, lineterminator="\n")
        w.writerow(METRIC_FIELDS)
        for r in self.rows:
            w.writerow([repr(r[k]) if isinstance(r[k], float) else r[k] for k in METRIC_FIELDS])
        return buf.getvalue()


@dataclass
class StepResult:
    terms: object
    correct: int
    count: int


def train_step(model: Model, x: np.ndarray, y: np.ndarray, config: TrainConfig, tau: float,
               sigma2: float, T, adam: AdamState, gumbel_rng, channel_rng) -> StepResult:
    """One mini-batch of forward, Monte Carlo loss, reverse pass and Adam update."""
    n, draws = len(y), config.mc_draws
    enc_tape = GradientTape()
    feat = forward_mlp(model.encoder, x, enc_tape)
    split = codec.split_features(feat, config.d, config.D)
    logits = codec.compute_logits(model.codebook, split)
    dist = codec.encoder_distribution(logits)
    enc_entropy = dist.total_entropy()

    sample = codec.gumbel_sample(np.broadcast_to(logits, (draws,) + logits.shape), tau, gumbel_rng)
    z_hat = extended_channel(sample.z, config.K, sigma2, channel_rng)
    selection = codec.straight_through_combine(sample.w, z_hat)
    embedded = codec.receiver_embed(model.codebook, z_hat, selection)

    inf_tape = GradientTape()
    out = forward_mlp(model.inference, embedded.reshape(draws * n, -1), inf_tape)
    ce, dout = softmax_cross_entropy(out, np.tile(y, draws))
    chan = channel_entropy_of_sample(sample.z, T)
    terms = vrib_loss(ce.reshape(draws, n).T, chan.T, enc_entropy, config.beta)
    if not math.isfinite(terms.total):
        raise NumericError("non-finite loss")
    correct = int(np.sum(np.argmax(out, axis=1) == np.tile(y, draws)))

    w_ce, w_h = vrib_gradient_weights(n, draws, config.beta)
    inf_grads = backward(inf_tape, (dout * w_ce).astype(out.dtype))
    dM_rx, dsel = codec.receiver_embed_backward(
        model.codebook, selection, inf_grads.input.reshape(draws, n, -1))
    dw = codec.straight_through_backward(dsel)
    dlogits = codec.gumbel_softmax_backward(sample, dw).sum(axis=0)
    if w_h:
        dlogits = dlogits + codec.entropy_backward(
            dist, np.full(dist.entropies.shape, w_h, dtype=logits.dtype))
    dM_tx, dfeat = codec.logits_backward(model.codebook, split, dlogits.astype(logits.dtype))
    enc_grads = backward(enc_tape, dfeat, input_gradient=False)

    grads = enc_grads.arrays() + [dM_rx + dM_tx] + inf_grads.arrays()
    adam_step(model.arrays(), [g.astype(np.float32, copy=False) for g in grads], adam)
    return StepResult(terms, correct, n * draws)


def train(config: TrainConfig, dataset: Dataset, seed: int | None = None,
          strict: bool = True, on_epoch=None) -> tuple[Checkpoint, MetricsLog]:
    """Train encoder, codebook and inference network jointly; returns checkpoint and log.

    ``on_epoch(epoch, checkpoint)``, if given, is called after every epoch with a
    checkpoint that shares the live parameters (copy it to keep a snapshot).
    """
    if len(dataset) == 0:
        raise StructuralError("empty dataset")
    seed = config.seed if seed is None else seed
    config = config.replace(seed=seed)
    init_ss, shuffle_ss, gumbel_ss, channel_ss = np.random.SeedSequence(seed).spawn(4)
    model = build_model(config, dataset.input_width, dataset.class_count,
                        np.random.default_rng(init_ss))
    shuffle_rng = np.random.default_rng(shuffle_ss)
    gumbel_rng = np.random.default_rng(gumbel_ss)
    channel_rng = np.random.default_rng(channel_ss)
    adam = AdamState.for_params(model.arrays(), lr=config.lr, beta1=config.adam_beta1,
                                beta2=config.adam_beta2, eps=config.adam_eps)
    sigma2 = psnr_to_sigma2(config.psnr_train_db)
    T = transition_matrix(config.K, sigma2)
    metrics = MetricsLog()
    tau = config.tau_initial
    ctx = strict_mode() if strict else _nullcontext()
    with ctx:
        for epoch in range(config.epochs):
            tau = tau_at(config.tau_schedule, epoch)
            start = time.perf_counter()
            sums = np.zeros(4)
            correct = count = seen = 0
            shuffle_seed = int(shuffle_rng.integers(2 ** 63))
            for b, (x, y) in enumerate(batches(dataset, config.batch_size, shuffle_seed)):
                try:
                    step = train_step(model, x, y, config, tau, sigma2, T, adam,
                                      gumbel_rng, channel_rng)
                except NumericError as exc:
                    raise NumericError(f"epoch {epoch + 1}, batch {b}: {exc}") from exc
                t = step.terms
                sums += len(y) * np.array([t.distortion, t.channel_entropy_term,
                                           t.encoder_entropy_term, t.total])
                seen += len(y)
                correct += step.correct
                count += step.count
            means = sums / seen
            metrics.append({
                "epoch": epoch + 1, "distortion": float(means[0]),
                "channel_entropy_term": float(means[1]), "encoder_entropy_term": float(means[2]),
                "beta": float(config.beta), "total": float(means[3]),
                "train_accuracy": correct / count, "tau": float(tau),
                "wall_clock_s": time.perf_counter() - start,
            })
            log.info("epoch %d loss %.4f acc %.4f H_enc %.3f tau %.3f (%.1fs)", epoch + 1,
                     means[3], correct / count, means[2], tau, metrics.rows[-1]["wall_clock_s"])
            if on_epoch is not None:
                on_epoch(epoch + 1, Checkpoint(config, model.encoder, model.inference,
                                               model.codebook, float(tau)))
    summary = {}
    if metrics.rows:
        last = metrics.rows[-1]
        summary = {k: float(last[k]) for k in ("total", "distortion", "encoder_entropy_term",
                                                "train_accuracy")}
    ckpt = Checkpoint(config, model.encoder, model.inference, model.codebook, float(tau), summary)
    return ckpt, metrics


class _nullcontext:
    def __enter__(self):
        return None

    def __exit__(self, *exc):
        return False


def encode(checkpoint: Checkpoint, x: np.ndarray) -> codec.EncoderDistribution:
    cfg = checkpoint.config
    feat = forward_mlp(checkpoint.encoder, x)
    logits = codec.compute_logits(checkpoint.codebook, codec.split_features(feat, cfg.d, cfg.D))
    return codec.encoder_distribution(logits)


def encoder_distributions(checkpoint: Checkpoint, dataset: Dataset, chunk: int = 2048):
    """Stream of per-chunk encoder distributions over a dataset."""
    for start in range(0, len(dataset), chunk):
        yield encode(checkpoint, dataset.samples[start:start + chunk])


def trial_seed(seed: int, psnr_db: float, trial: int) -> np.random.SeedSequence:
    """Channel stream for one evaluation trial, independent of evaluation order."""
    return np.random.SeedSequence([seed, int(round(psnr_db * 1000)) + 10 ** 6, trial])


@dataclass
class EvalResult:
    psnr_db: float
    accuracy: float
    std: float
    trials: list[float]


def evaluate(checkpoint: Checkpoint, dataset: Dataset, psnr_test_db: float, trials: int = 10,
             seed: int = 0) -> EvalResult:
    """Accuracy over ``trials`` channel realizations with the encoder's hard mode.

    ``std`` is the binomial standard error over all n * trials decisions.
    """
    if dataset.input_width != checkpoint.input_width:
        raise StructuralError(f"dataset width {dataset.input_width} != checkpoint input "
                              f"{checkpoint.input_width}")
    cfg = checkpoint.config
    sigma2 = psnr_to_sigma2(psnr_test_db)
    z = np.concatenate([dist.mode() for dist in encoder_distributions(checkpoint, dataset)])
    accs = []
    with strict_mode():
        for t in range(trials):
            rng = np.random.default_rng(trial_seed(seed, psnr_test_db, t))
            z_hat = extended_channel(z, cfg.K, sigma2, rng)
            emb = codec.receiver_embed(checkpoint.codebook, z_hat)
            pred = np.argmax(forward_mlp(checkpoint.inference, emb), axis=1)
            accs.append(float(np.mean(pred == dataset.labels)))
    acc = float(np.mean(accs))
    std = math.sqrt(acc * (1 - acc) / (len(dataset) * trials))
    return EvalResult(float(psnr_test_db), acc, std, accs)


EVAL_DRAWS = 8


def evaluate_loss(checkpoint: Checkpoint, dataset: Dataset, psnr_db: float | None = None,
                  draws: int = EVAL_DRAWS, seed: int = 0, chunk: int = 1024):
    """Monte Carlo RIB loss terms over a dataset, ``draws`` relaxed samples per input.

    Uses the checkpoint's final temperature and, by default, its training PSNR.
    """
    cfg = checkpoint.config
    psnr_db = cfg.psnr_train_db if psnr_db is None else psnr_db
    sigma2 = psnr_to_sigma2(psnr_db)
    T = transition_matrix(cfg.K, sigma2)
    gumbel_rng, channel_rng = (np.random.default_rng(s)
                               for s in np.random.SeedSequence([seed, 1]).spawn(2))
    ce_all, chan_all, enc_all = [], [], []
    with strict_mode():
        for start in range(0, len(dataset), chunk):
            x = dataset.samples[start:start + chunk]
            y = dataset.labels[start:start + chunk]
            dist = encode(checkpoint, x)
            sample = codec.gumbel_sample(np.broadcast_to(dist.logits, (draws,) + dist.logits.shape),
                                         checkpoint.final_tau, gumbel_rng)
            z_hat = extended_channel(sample.z, cfg.K, sigma2, channel_rng)
            emb = codec.receiver_embed(checkpoint.codebook, z_hat)
            out = forward_mlp(checkpoint.inference, emb.reshape(draws * len(y), -1))
            ce, _ = softmax_cross_entropy(out, np.tile(y, draws))
            ce_all.append(ce.reshape(draws, len(y)).T)
            chan_all.append(channel_entropy_of_sample(sample.z, T).T)
            enc_all.append(dist.total_entropy())
    return vrib_loss(np.concatenate(ce_all), np.concatenate(chan_all), np.concatenate(enc_all),
                     cfg.beta)


# checkpoint file: magic, u32 section count, then (u32 name len, name, u64 len, payload)*

def _kv_text(d: dict) -> bytes:
    return "".join(f"{k} = {v!r}\n" if isinstance(v, float) else f"{k} = {v}\n"
                   for k, v in d.items()).encode()


def _parse_kv(blob: bytes, section: str) -> dict[str, str]:
    out = {}
    try:
        text = blob.decode("utf-8")
    except UnicodeDecodeError as exc:
        raise FormatError(f"section {section!r} is not UTF-8", section=section) from exc
    for line in text.splitlines():
        if line.strip():
            if "=" not in line:
                raise FormatError(f"section {section!r}: malformed line {line!r}", section=section)
            k, v = (s.strip() for s in line.split("=", 1))
            out[k] = v
    return out


def _param_sections(prefix: str, params: MlpParams):
    for i, layer in enumerate(params.layers):
        yield f"{prefix}.{i}.weight", layer.weight
        yield f"{prefix}.{i}.bias", layer.bias


def save_checkpoint(checkpoint: Checkpoint, path) -> None:
    manifest = {}
    arrays = []
    for prefix, params in (("encoder", checkpoint.encoder), ("inference", checkpoint.inference)):
        for i, layer in enumerate(params.layers):
            manifest[f"{prefix}.{i}"] = f"{layer.out_dim}x{layer.in_dim} {layer.activation}"
        arrays.extend(_param_sections(prefix, params))
    manifest["codebook.M"] = f"{checkpoint.codebook.D}x{checkpoint.codebook.K}"
    arrays.append(("codebook.M", checkpoint.codebook.M))

    state = {"final_tau": float(checkpoint.final_tau)}
    state.update({f"metric.{k}": float(v) for k, v in checkpoint.metrics.items()})
    sections = [("manifest", _kv_text(manifest)),
                ("config", checkpoint.config.to_text().encode()),
                ("state", _kv_text(state))]
    sections += [(name, np.ascontiguousarray(a, dtype="<f4").tobytes()) for name, a in arrays]
    sections.append(("checksums", _kv_text({n: f"{zlib.crc32(p):08x}" for n, p in sections})))

    buf = io.BytesIO()
    buf.write(MAGIC_PREFIX + f"{checkpoint.version:02d}".encode())
    buf.write(struct.pack("<I", len(sections)))
    for name, payload in sections:
        raw = name.encode()
        buf.write(struct.pack("<I", len(raw)) + raw + struct.pack("<Q", len(payload)) + payload)
    try:
        Path(path).write_bytes(buf.getvalue())
    except OSError as exc:
        raise OSError(f"cannot write checkpoint {path}: {exc}") from exc


def _read_sections(blob: bytes) -> dict[str, bytes]:
    if len(blob) < 8 or blob[:6] != MAGIC_PREFIX:
        raise FormatError("bad magic: not a checkpoint file", section="magic")
    try:
        version = int(blob[6:8].decode("ascii"))
    except ValueError as exc:
        raise FormatError("bad magic version digits", section="magic") from exc
    if version != FORMAT_VERSION:
        raise VersionError(f"checkpoint format version {version}, this build reads "
                           f"{FORMAT_VERSION}", section="magic")
    pos = 8

    def take(n, what):
        nonlocal pos
        if pos + n > len(blob):
            raise FormatError(f"file truncated while reading {what}", section=what)
        chunk = blob[pos:pos + n]
        pos += n
        return chunk

    (count,) = struct.unpack("<I", take(4, "section count"))
    sections = {}
    for i in range(count):
        (nlen,) = struct.unpack("<I", take(4, f"section {i} header"))
        name = take(nlen, f"section {i} name").decode("utf-8", errors="replace")
        (plen,) = struct.unpack("<Q", take(8, f"{name} length"))
        sections[name] = take(plen, name)
    if pos != len(blob):
        raise FormatError("trailing bytes after last section", section="trailer")
    if "checksums" not in sections:
        raise FormatError("missing checksums section", section="checksums")
    sums = _parse_kv(sections["checksums"], "checksums")
    for name, payload in sections.items():
        if name == "checksums":
            continue
        if sums.get(name) != f"{zlib.crc32(payload):08x}":
            raise FormatError(f"checksum mismatch in section {name!r}", section=name)
    return sections


def _load_params(prefix: str, manifest: dict[str, str], sections) -> MlpParams:
    layers = []
    i = 0
    while f"{prefix}.{i}" in manifest:
        shape, act = manifest[f"{prefix}.{i}"].split()
        out_dim, in_dim = (int(s) for s in shape.split("x"))
        w = _array(sections, f"{prefix}.{i}.weight", (out_dim, in_dim))
        b = _array(sections, f"{prefix}.{i}.bias", (out_dim,))
        layers.append(Layer(w, b, act))
        i += 1
    return MlpParams(layers)


def _array(sections, name, shape) -> np.ndarray:
    if name not in sections:
        raise FormatError(f"missing section {name!r}", section=name)
    payload = sections[name]
    if len(payload) != 4 * int(np.prod(shape)):
        raise FormatError(f"section {name!r} has {len(payload)} bytes for shape {shape}",
                          section=name)
    return np.frombuffer(payload, dtype="<f4").astype(np.float32).reshape(shape)


def load_checkpoint(path) -> Checkpoint:
    sections = _read_sections(Path(path).read_bytes())
    for name in ("manifest", "config", "state"):
        if name not in sections:
            raise FormatError(f"missing section {name!r}", section=name)
    manifest = _parse_kv(sections["manifest"], "manifest")
    try:
        config = TrainConfig.from_text(sections["config"].decode("utf-8"))
    except (ConfigError, UnicodeDecodeError) as exc:
        raise FormatError(f"config section: {exc}", section="config") from exc
    state = _parse_kv(sections["state"], "state")
    D, K = (int(s) for s in manifest["codebook.M"].split("x"))
    return Checkpoint(
        config=config,
        encoder=_load_params("encoder", manifest, sections),
        inference=_load_params("inference", manifest, sections),
        codebook=Codebook(_array(sections, "codebook.M", (D, K))),
        final_tau=float(state["final_tau"]),
        metrics={k[len("metric."):]: float(v) for k, v in state.items() if k.startswith("metric.")},
    )
