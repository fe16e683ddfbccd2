"""Training engine: source-domain pretraining, incremental training with a
frozen teacher and replayed source images, checkpointing, and experiment
grids.

One shared step loop drives both phases.  Samples are tagged with their
domain; task-domain samples drive the reconstruction/edge/color/identity/
adversarial terms and the discriminator updates, while replayed samples
from the other domain are fed through both the frozen teacher and the
student to produce the distillation terms.  Both kinds co-occur inside a
batch, so the combined objective is minimized in single steps.
"""

from __future__ import annotations

import hashlib
import struct
from dataclasses import dataclass, field, fields, replace

import numpy as np

from .autograd import Tensor, no_grad
from .errors import CheckpointError, ConfigError, TrainingDiverged
from .imageops import augment, canny_edges, degrade, luminance, resize_bicubic
from .losses import (
    LossWeights, adversarial_loss_d, adversarial_loss_g, edge_loss,
    identity_loss, kd_loss, lce_loss, reconstruction_loss, total_loss,
)
from .metrics import evaluate
from .networks import (
    Discriminator, Generator, IdentityEmbedder, freeze,
    init_student_from_teacher,
)
from .optim import Adam

CHECKPOINT_MAGIC = b"ISRK"
CHECKPOINT_VERSION = 1

TERM_NAMES = ("kd_response", "kd_feature", "edge", "adversarial", "lce",
              "identity", "reconstruction")
TRAIN_LOG_HEADER = "epoch," + ",".join(TERM_NAMES) + ",total"

EDGE_SCALE_MODES = ("final", "all")
EDGE_SCALES = (32, 64, 128)


# ----------------------------------------------------------------------
# configuration


@dataclass
class TrainConfig:
    epochs: int = 100
    batch_size: int = 8
    lr: float = 1e-4
    adam_eps: float = 1e-8
    g_beta1: float = 0.9
    g_beta2: float = 0.999
    d_beta1: float = 0.5
    d_beta2: float = 0.9
    weights: LossWeights = field(default_factory=LossWeights)
    seed: int = 0
    feature_width: int = 64
    d_width_scale: float = 1.0
    extended_tail: bool = False
    edge_scale_mode: str = "final"
    nonsaturating_g: bool = False
    augment: bool = False
    crop_resize: bool = False
    noise_sigma: float = 2 / 255
    reinit_discriminator: bool = False

    def __post_init__(self):
        for name in ("epochs", "batch_size", "feature_width"):
            if getattr(self, name) < 1:
                raise ConfigError(f"{name} must be >= 1, got {getattr(self, name)}")
        for name in ("lr", "adam_eps", "d_width_scale"):
            if getattr(self, name) <= 0:
                raise ConfigError(f"{name} must be > 0, got {getattr(self, name)}")
        for name in ("g_beta1", "g_beta2", "d_beta1", "d_beta2"):
            b = getattr(self, name)
            if not 0 < b < 1:
                raise ConfigError(f"{name} must lie in (0, 1), got {b}")
        if self.edge_scale_mode not in EDGE_SCALE_MODES:
            raise ConfigError(
                f"edge_scale_mode must be one of {EDGE_SCALE_MODES}, "
                f"got {self.edge_scale_mode!r}")
        if self.noise_sigma < 0:
            raise ConfigError(f"noise_sigma must be >= 0, got {self.noise_sigma}")


@dataclass
class MixSpec:
    n_source: int
    n_target: int

    def __post_init__(self):
        if self.n_source < 0:
            raise ConfigError(f"n_source must be >= 0, got {self.n_source}")
        if self.n_target < 1:
            raise ConfigError(f"n_target must be >= 1, got {self.n_target}")


_BOOL_KEYS = ("extended_tail", "nonsaturating_g", "augment", "crop_resize",
              "reinit_discriminator")
_INT_KEYS = ("epochs", "batch_size", "seed", "feature_width")
_FLOAT_KEYS = ("lr", "adam_eps", "g_beta1", "g_beta2", "d_beta1", "d_beta2",
               "d_width_scale", "noise_sigma")
_STR_KEYS = ("edge_scale_mode",)
_WEIGHT_KEYS = tuple(f"weight_{name}" for name in TERM_NAMES)


def parse_config_lines(lines, source="<config>"):
    """Parse line-oriented ``key = value`` text into a TrainConfig.

    Blank lines and ``#`` comments are skipped; unknown keys are errors.
    """
    kwargs = {}
    weights = {}
    for lineno, raw in enumerate(lines, start=1):
        line = raw.split("#", 1)[0].strip()
        if not line:
            continue
        if "=" not in line:
            raise ConfigError(f"{source}:{lineno}: expected 'key = value', got {raw!r}")
        key, _, value = line.partition("=")
        key = key.strip()
        value = value.strip()
        try:
            if key in _INT_KEYS:
                kwargs[key] = int(value)
            elif key in _FLOAT_KEYS:
                kwargs[key] = float(value)
            elif key in _STR_KEYS:
                kwargs[key] = value
            elif key in _BOOL_KEYS:
                if value not in ("true", "false"):
                    raise ValueError("expected true or false")
                kwargs[key] = value == "true"
            elif key in _WEIGHT_KEYS:
                weights[key[len("weight_"):]] = float(value)
            else:
                raise ConfigError(f"{source}:{lineno}: unknown key {key!r}")
        except ConfigError:
            raise
        except ValueError as exc:
            raise ConfigError(f"{source}:{lineno}: bad value for {key}: {exc}") from exc
    if weights:
        try:
            kwargs["weights"] = LossWeights(**weights)
        except ValueError as exc:
            raise ConfigError(str(exc)) from exc
    try:
        return TrainConfig(**kwargs)
    except ValueError as exc:
        raise ConfigError(str(exc)) from exc


def load_config(path):
    try:
        with open(path, "r", encoding="utf-8") as fh:
            return parse_config_lines(fh, source=str(path))
    except OSError as exc:
        raise ConfigError(f"cannot read config {path}: {exc}") from exc


def config_hash(config):
    """SHA-256 over the canonical key=value rendering of the config."""
    parts = []
    for f in sorted(fields(config), key=lambda f: f.name):
        v = getattr(config, f.name)
        if isinstance(v, LossWeights):
            v = sorted(v.as_dict().items())
        parts.append(f"{f.name}={v!r}")
    return hashlib.sha256(";".join(parts).encode()).hexdigest()


# ----------------------------------------------------------------------
# checkpoints


@dataclass
class Checkpoint:
    version: int
    params: dict            # "g/<name>" and "d/<name>" -> float32 ndarray
    meta: dict              # name -> float (scalars) or ndarray

    def meta_int(self, name):
        return int(self.meta[name])

    def meta_bool(self, name):
        return bool(int(self.meta[name]))


def build_checkpoint(generator, discriminator, config, epoch):
    params = {f"g/{n}": p.data.astype(np.float32, copy=True)
              for n, p in generator.params.items()}
    if discriminator is not None:
        params.update({f"d/{n}": p.data.astype(np.float32, copy=True)
                       for n, p in discriminator.params.items()})
    digest = hashlib.sha256(config_hash(config).encode()).digest()
    meta = {
        "feature_width": float(generator.feature_width),
        "extended_tail": float(generator.extended_tail),
        "d_width_scale": float(discriminator.width_scale
                               if discriminator is not None else 0.0),
        "epoch": float(epoch),
        "seed": float(config.seed),
        "config_hash": np.frombuffer(digest, dtype=np.uint8).astype(np.float32),
    }
    return Checkpoint(version=CHECKPOINT_VERSION, params=params, meta=meta)


def generator_from_checkpoint(ckpt):
    gen = Generator(
        params={}, feature_width=ckpt.meta_int("feature_width"),
        extended_tail=ckpt.meta_bool("extended_tail"))
    for key, arr in ckpt.params.items():
        if key.startswith("g/"):
            gen.params[key[2:]] = Tensor(arr.copy(), requires_grad=True)
    if not gen.params:
        raise CheckpointError("checkpoint holds no generator parameters")
    return gen


def discriminator_from_checkpoint(ckpt):
    scale = float(ckpt.meta["d_width_scale"])
    if scale == 0.0:
        return None
    names = [k for k in ckpt.params if k.startswith("d/")]
    if not names:
        return None
    rng = np.random.default_rng(0)
    disc = Discriminator.init(rng, width_scale=scale)
    for key in names:
        name = key[2:]
        if name not in disc.params:
            raise CheckpointError(f"unexpected discriminator parameter {name!r}")
        if disc.params[name].data.shape != ckpt.params[key].shape:
            raise CheckpointError(
                f"discriminator parameter {name!r} has shape "
                f"{ckpt.params[key].shape}, expected {disc.params[name].data.shape}")
        disc.params[name] = Tensor(ckpt.params[key].copy(), requires_grad=True)
    return disc


def _write_tensor(fh, name, arr):
    arr = np.ascontiguousarray(arr, dtype="<f4")
    encoded = name.encode("utf-8")
    fh.write(struct.pack("<H", len(encoded)))
    fh.write(encoded)
    fh.write(struct.pack("<B", arr.ndim))
    for d in arr.shape:
        fh.write(struct.pack("<I", d))
    fh.write(arr.tobytes())


def save_checkpoint(ckpt, path):
    entries = []
    for name in sorted(ckpt.meta):
        v = ckpt.meta[name]
        arr = np.asarray(v, dtype=np.float32)
        entries.append((f"meta/{name}", arr))
    for name in sorted(ckpt.params):
        entries.append((name, ckpt.params[name]))
    with open(path, "wb") as fh:
        fh.write(CHECKPOINT_MAGIC)
        fh.write(struct.pack("<I", ckpt.version))
        fh.write(struct.pack("<I", len(entries)))
        for name, arr in entries:
            _write_tensor(fh, name, arr)


def _read_exact(fh, n, what):
    buf = fh.read(n)
    if len(buf) != n:
        raise CheckpointError(f"truncated checkpoint while reading {what}")
    return buf


def load_checkpoint(path):
    try:
        fh = open(path, "rb")
    except OSError as exc:
        raise CheckpointError(f"cannot open checkpoint {path}: {exc}") from exc
    with fh:
        magic = _read_exact(fh, 4, "magic bytes")
        if magic != CHECKPOINT_MAGIC:
            raise CheckpointError(
                f"bad magic bytes {magic!r}, expected {CHECKPOINT_MAGIC!r}")
        version = struct.unpack("<I", _read_exact(fh, 4, "version"))[0]
        if version != CHECKPOINT_VERSION:
            raise CheckpointError(
                f"unsupported checkpoint version {version}, "
                f"expected {CHECKPOINT_VERSION}")
        count = struct.unpack("<I", _read_exact(fh, 4, "tensor count"))[0]
        params = {}
        meta = {}
        for _ in range(count):
            nlen = struct.unpack("<H", _read_exact(fh, 2, "name length"))[0]
            name = _read_exact(fh, nlen, "name").decode("utf-8")
            rank = struct.unpack("<B", _read_exact(fh, 1, "rank"))[0]
            shape = tuple(
                struct.unpack("<I", _read_exact(fh, 4, "dimension"))[0]
                for _ in range(rank))
            size = int(np.prod(shape, dtype=np.int64)) if shape else 1
            raw = _read_exact(fh, size * 4, f"data of {name!r}")
            arr = np.frombuffer(raw, dtype="<f4").reshape(shape).copy()
            if name.startswith("meta/"):
                key = name[len("meta/"):]
                meta[key] = float(arr.item()) if arr.size == 1 else arr
            else:
                params[name] = arr
        if fh.read(1):
            raise CheckpointError("trailing bytes after declared tensors")
    return Checkpoint(version=version, params=params, meta=meta)


# ----------------------------------------------------------------------
# dataset preparation


def build_mixed_dataset(source_pool, target_pool, mix, seed):
    """Sample without replacement from each pool and interleave, shuffled."""
    if len(source_pool) < mix.n_source:
        raise ValueError(
            f"source pool has {len(source_pool)} samples, need {mix.n_source}")
    if len(target_pool) < mix.n_target:
        raise ValueError(
            f"target pool has {len(target_pool)} samples, need {mix.n_target}")
    rng = np.random.default_rng([seed, 99])
    chosen = []
    if mix.n_source:
        idx = rng.choice(len(source_pool), size=mix.n_source, replace=False)
        chosen.extend(source_pool[i] for i in idx)
    idx = rng.choice(len(target_pool), size=mix.n_target, replace=False)
    chosen.extend(target_pool[i] for i in idx)
    order = rng.permutation(len(chosen))
    return [chosen[i] for i in order]


def _nchw(img):
    return np.transpose(np.asarray(img, dtype=np.float32), (2, 0, 1))


def _edge_targets(edges, mode):
    out = {128: edges[None, :, :].astype(np.float32)}
    if mode == "all":
        for size in (32, 64):
            small = resize_bicubic(edges, size, size)
            out[size] = np.clip(small, 0.0, 1.0)[None, :, :].astype(np.float32)
    return out


def _prepare(sample, config, aug_seed=None):
    hr = sample.hr
    lr = sample.lr
    edges = sample.hr_edges
    if aug_seed is not None:
        hr = augment(hr, seed=aug_seed, crop_resize=config.crop_resize)
        lr = degrade(hr, noise_sigma=config.noise_sigma, seed=aug_seed)
        edges = canny_edges(luminance(hr))
    return {
        "lr": _nchw(lr),
        "hr": _nchw(hr),
        "edges": _edge_targets(edges, config.edge_scale_mode),
        "domain": sample.domain,
    }


def _batch(prepared, key):
    return Tensor(np.stack([p[key] for p in prepared]))


def _edge_batch(prepared, size):
    return Tensor(np.stack([p["edges"][size] for p in prepared]))


# ----------------------------------------------------------------------
# the shared step loop


@dataclass
class TrainResult:
    generator: Generator
    discriminator: Discriminator
    log: list               # one dict per epoch: epoch, term means, total
    term_sample_counts: dict  # term -> number of samples that contributed


def _zero_missing_grads(params):
    for p in params.values():
        if p.requires_grad and p.grad is None:
            p.grad = np.zeros_like(p.data)


def _train_loop(generator, discriminator, dataset, config, task_domain,
                teacher=None, embedder=None):
    """Run the epoch/batch loop, mutating generator and discriminator.

    ``task_domain`` samples drive the task losses and discriminator steps;
    samples from the other domain are replayed through ``teacher`` and the
    student for the distillation terms.  Raises TrainingDiverged (with a
    checkpoint of the last completed epoch attached) on non-finite losses.
    """
    if not dataset:
        raise ValueError("training dataset is empty")
    replay = [s for s in dataset if s.domain != task_domain]
    if replay and teacher is None:
        raise ValueError(
            f"{len(replay)} replayed samples present but no teacher given")
    if embedder is None:
        embedder = IdentityEmbedder()
    w = config.weights
    opt_g = Adam(generator.params, lr=config.lr, beta1=config.g_beta1,
                 beta2=config.g_beta2, eps=config.adam_eps)
    opt_d = Adam(discriminator.params, lr=config.lr, beta1=config.d_beta1,
                 beta2=config.d_beta2, eps=config.adam_eps)
    loop_rng = np.random.default_rng([config.seed, 17])
    counts = {name: 0 for name in TERM_NAMES}
    log = []
    last_good = build_checkpoint(generator, discriminator, config, epoch=0)

    for epoch in range(1, config.epochs + 1):
        order = loop_rng.permutation(len(dataset))
        sums = {name: 0.0 for name in TERM_NAMES}
        steps = {name: 0 for name in TERM_NAMES}
        total_sum = 0.0
        n_steps = 0
        for start in range(0, len(dataset), config.batch_size):
            batch = [dataset[i] for i in order[start:start + config.batch_size]]
            aug_seeds = (
                [int(loop_rng.integers(2 ** 32)) for _ in batch]
                if config.augment else [None] * len(batch))
            prepared = [_prepare(s, config, a) for s, a in zip(batch, aug_seeds)]
            task = [p for p in prepared if p["domain"] == task_domain]
            rep = [p for p in prepared if p["domain"] != task_domain]

            # discriminator step on task-domain real/fake pairs
            if task and w.adversarial > 0:
                lr_t = _batch(task, "lr")
                hr_t = _batch(task, "hr")
                with no_grad():
                    fake = generator.forward(lr_t).sr
                opt_d.zero_grad()
                d_loss = adversarial_loss_d(
                    discriminator.forward(hr_t), discriminator.forward(fake))
                if not np.isfinite(d_loss.item()):
                    exc = TrainingDiverged(
                        f"discriminator loss diverged at epoch {epoch}",
                        {"d_adversarial": d_loss.item()})
                    exc.last_good = last_good
                    raise exc
                d_loss.backward()
                _zero_missing_grads(discriminator.params)
                opt_d.step()

            # generator step: task losses plus distillation from replay
            terms = {}
            if task:
                lr_t = _batch(task, "lr")
                hr_t = _batch(task, "hr")
                out = generator.forward(lr_t)
                terms["reconstruction"] = reconstruction_loss(out.sr, hr_t)
                if config.edge_scale_mode == "all":
                    e = None
                    for i, size in enumerate(EDGE_SCALES):
                        part = edge_loss(out.edge_maps[i], _edge_batch(task, size))
                        e = part if e is None else e + part
                    terms["edge"] = e * (1.0 / len(EDGE_SCALES))
                else:
                    terms["edge"] = edge_loss(out.edge_maps[-1], _edge_batch(task, 128))
                terms["lce"] = lce_loss(out.sr, hr_t)
                terms["identity"] = identity_loss(
                    embedder.embed(out.sr), embedder.embed(hr_t))
                if w.adversarial > 0:
                    terms["adversarial"] = adversarial_loss_g(
                        discriminator.forward(out.sr),
                        saturating=not config.nonsaturating_g)
            if rep:
                lr_s = _batch(rep, "lr")
                with no_grad():
                    t_out = teacher.forward(lr_s)
                s_out = generator.forward(lr_s)
                _, resp, feat = kd_loss(
                    t_out.sr, s_out.sr, t_out.bottleneck, s_out.bottleneck,
                    w.kd_response, w.kd_feature)
                terms["kd_response"] = resp
                terms["kd_feature"] = feat
            if not terms:
                continue
            try:
                total, breakdown = total_loss(terms, w)
            except ValueError as exc:
                diverged = TrainingDiverged(
                    f"loss diverged at epoch {epoch}: {exc}",
                    {k: (v.item() if isinstance(v, Tensor) else float(v))
                     for k, v in terms.items()})
                diverged.last_good = last_good
                raise diverged from exc
            opt_g.zero_grad()
            total.backward()
            _zero_missing_grads(generator.params)
            opt_g.step()

            for name, value in breakdown.terms.items():
                sums[name] += value
                steps[name] += 1
                counts[name] += len(rep if name.startswith("kd_") else task)
            total_sum += breakdown.total
            n_steps += 1

        row = {"epoch": epoch}
        for name in TERM_NAMES:
            row[name] = sums[name] / steps[name] if steps[name] else 0.0
        row["total"] = total_sum / n_steps if n_steps else 0.0
        log.append(row)
        last_good = build_checkpoint(generator, discriminator, config, epoch)

    return TrainResult(generator=generator, discriminator=discriminator,
                       log=log, term_sample_counts=counts)


# ----------------------------------------------------------------------
# public training entry points


def pretrain_source(config, source_dataset, task_domain="source"):
    """Train generator and discriminator from scratch on one domain."""
    if not source_dataset:
        raise ValueError("pretraining dataset is empty")
    rng = np.random.default_rng(config.seed)
    generator = Generator.init(rng, feature_width=config.feature_width)
    discriminator = Discriminator.init(rng, width_scale=config.d_width_scale)
    return _train_loop(generator, discriminator, list(source_dataset), config,
                       task_domain=task_domain)


def incremental_train(teacher_ckpt, mix, config, source_pool, target_pool,
                      task_domain="target"):
    """Adapt a pretrained generator to the target domain with replay.

    The student starts as a copy of the teacher; the teacher itself stays
    frozen and untouched.  The discriminator is carried over from the
    checkpoint unless ``config.reinit_discriminator`` is set (or the
    checkpoint has none).
    """
    teacher = freeze(generator_from_checkpoint(teacher_ckpt))
    rng = np.random.default_rng([config.seed, 23])
    student = init_student_from_teacher(
        teacher, rng=rng, extended_tail=config.extended_tail or None)
    discriminator = None
    if not config.reinit_discriminator:
        discriminator = discriminator_from_checkpoint(teacher_ckpt)
    if discriminator is None:
        discriminator = Discriminator.init(rng, width_scale=config.d_width_scale)
    if task_domain == "target":
        dataset = build_mixed_dataset(source_pool, target_pool, mix, config.seed)
    else:
        dataset = build_mixed_dataset(target_pool, source_pool, mix, config.seed)
    return _train_loop(student, discriminator, dataset, config,
                       task_domain=task_domain, teacher=teacher)


def write_train_log(log, path):
    """Per-epoch loss CSV, UTF-8 with LF endings, byte-stable across reruns."""
    lines = [TRAIN_LOG_HEADER]
    for row in log:
        values = ",".join(f"{row[name]:.6f}" for name in TERM_NAMES)
        lines.append(f"{row['epoch']},{values},{row['total']:.6f}")
    with open(path, "w", encoding="utf-8", newline="\n") as fh:
        fh.write("\n".join(lines) + "\n")


# ----------------------------------------------------------------------
# experiment grids


@dataclass
class GridSetting:
    name: str
    mix: MixSpec
    weights: LossWeights = field(default_factory=LossWeights)


def run_experiment_grid(settings, config, source_train, source_test,
                        target_train, target_test, direction="forward",
                        teacher_ckpt=None, embedder=None):
    """Pretrain once, then run each setting and evaluate on both domains.

    Returns (rows, logs): two MetricsReport rows per setting (one per test
    domain, labelled with the original domain names regardless of
    direction) and the per-setting training logs.  With ``direction`` set
    to "reverse" the roles swap: pretraining runs on the target domain and
    the incremental phase adapts to the source domain with target replay.
    """
    settings = list(settings)
    if not settings:
        raise ValueError("experiment grid needs at least one setting")
    if direction not in ("forward", "reverse"):
        raise ValueError(f"direction must be forward or reverse, got {direction!r}")
    if embedder is None:
        embedder = IdentityEmbedder()
    task_domain = "target" if direction == "forward" else "source"
    pretrain_pool = source_train if direction == "forward" else target_train
    if teacher_ckpt is None:
        pre = pretrain_source(config, pretrain_pool,
                              task_domain=("source" if direction == "forward"
                                           else "target"))
        teacher_ckpt = build_checkpoint(pre.generator, pre.discriminator,
                                        config, epoch=config.epochs)
    rows = []
    logs = {}
    for setting in settings:
        cfg = replace(config, weights=setting.weights)
        result = incremental_train(teacher_ckpt, setting.mix, cfg,
                                   source_train, target_train,
                                   task_domain=task_domain)
        logs[setting.name] = result.log
        for domain, test_set in (("source", source_test), ("target", target_test)):
            row = evaluate(result.generator, test_set, embedder)
            row["experiment"] = setting.name
            row["test_domain"] = domain
            rows.append(row)
    return rows, logs
