"""Episodic training loop.

Each episode draws m samples, extracts features once, rebuilds prototypes
by clustering, back-translates them into the student spaces, then runs
minibatch optimization against those frozen classifiers. The optimizer is
Adam with decoupled weight decay, warmup-cosine learning rate, global
gradient clipping, and learnable clipped temperatures.
"""

import math
from dataclasses import dataclass, field

import numpy as np

from . import autodiff as ad
from . import data as datamod
from . import encoders, losses, prototypes
from .config import validate
from .errors import ConfigError, ContractError, DataError, NonFiniteError, TrainingError

METRICS_HEADER = (
    "episode,step,loss_clip,loss_proto,loss_external,"
    "loss_total,tau_clip,tau_proto,lr,grad_norm"
)
METRICS_COLUMNS = METRICS_HEADER.split(",")


@dataclass
class TwoTowerModel:
    image_tower: encoders.Mlp
    text_tower: encoders.Mlp
    image_head: encoders.Mlp
    text_head: encoders.Mlp
    tau_clip: losses.TemperatureParam
    tau_proto: losses.TemperatureParam


def build_model(cfg, seed=None):
    """Initialize both towers, both heads, and the two temperatures."""
    rng = np.random.default_rng(cfg.seed_params if seed is None else seed)
    sub = rng.integers(0, 2**63, size=4)
    return TwoTowerModel(
        image_tower=encoders.init_params(
            [cfg.d_image, cfg.tower_hidden, cfg.d_z], sub[0]
        ),
        text_tower=encoders.init_params(
            [cfg.d_text, cfg.tower_hidden, cfg.d_z], sub[1]
        ),
        image_head=encoders.init_params([cfg.d_z, cfg.head_hidden, cfg.d_h], sub[2]),
        text_head=encoders.init_params([cfg.d_z, cfg.head_hidden, cfg.d_h], sub[3]),
        tau_clip=losses.TemperatureParam.create(cfg.tau_init),
        tau_proto=losses.TemperatureParam.create(cfg.tau_init),
    )


def _slots(model):
    """Ordered name -> (container, key) map over every trainable tensor."""
    slots = {}
    parts = (
        ("image_tower", model.image_tower),
        ("text_tower", model.text_tower),
        ("image_head", model.image_head),
        ("text_head", model.text_head),
    )
    for prefix, mlp in parts:
        for i in range(len(mlp.weights)):
            slots[f"{prefix}.w{i}"] = (mlp.weights, i)
            slots[f"{prefix}.b{i}"] = (mlp.biases, i)
    slots["temperature.clip"] = (model.tau_clip, "log_inv_tau")
    slots["temperature.proto"] = (model.tau_proto, "log_inv_tau")
    return slots


def _slot_get(slot):
    container, key = slot
    return container[key] if isinstance(key, int) else getattr(container, key)


def _slot_set(slot, value):
    container, key = slot
    if isinstance(key, int):
        container[key] = value
    else:
        setattr(container, key, value)


def named_tensors(model):
    return {name: _slot_get(slot) for name, slot in _slots(model).items()}


def save_model(path, model):
    encoders.save_checkpoint(path, named_tensors(model))


def load_model(path, cfg):
    """Rebuild a model from cfg shapes and fill it from a checkpoint."""
    model = build_model(cfg)
    stored = encoders.load_checkpoint(path)
    slots = _slots(model)
    if set(stored) != set(slots):
        missing = sorted(set(slots) - set(stored))
        extra = sorted(set(stored) - set(slots))
        raise DataError(
            f"checkpoint does not match the configured model "
            f"(missing {missing}, unexpected {extra})"
        )
    for name, slot in slots.items():
        current = _slot_get(slot)
        if stored[name].shape != current.shape:
            raise DataError(
                f"checkpoint tensor {name!r} has shape {stored[name].shape}, "
                f"config implies {current.shape}"
            )
        _slot_set(slot, stored[name])
    return model


def _is_image(name):
    return name.startswith("image_")


def _is_temperature(name):
    return name.startswith("temperature.")


class AdamW:
    """Adam with decoupled weight decay and per-tensor learning rates."""

    def __init__(self, shapes, beta1=0.9, beta2=0.999, eps=1e-8):
        self.beta1, self.beta2, self.eps = beta1, beta2, eps
        self.t = 0
        self.m = {name: np.zeros(shape) for name, shape in shapes.items()}
        self.v = {name: np.zeros(shape) for name, shape in shapes.items()}

    def step(self, values, grads, lr_of, decay_of):
        """Return updated arrays; lr 0 leaves a tensor bitwise untouched."""
        self.t += 1
        bc1 = 1.0 - self.beta1**self.t
        bc2 = 1.0 - self.beta2**self.t
        out = {}
        for name, p in values.items():
            lr = lr_of(name)
            if lr == 0.0:
                out[name] = p
                continue
            g = grads[name]
            self.m[name] = self.beta1 * self.m[name] + (1.0 - self.beta1) * g
            self.v[name] = self.beta2 * self.v[name] + (1.0 - self.beta2) * g * g
            step_dir = (self.m[name] / bc1) / (np.sqrt(self.v[name] / bc2) + self.eps)
            out[name] = p - lr * step_dir - lr * decay_of(name) * p
        return out


def episode_schedule(n_samples, episode_size, n_epoch):
    """Episode sizes covering n_epoch passes; a short final episode keeps
    the total sample count exact when episode_size does not divide it."""
    if n_samples < 1 or episode_size < 1:
        raise ConfigError("dataset and episode sizes must be positive")
    if episode_size > n_samples:
        raise ConfigError(
            f"episode_size ({episode_size}) exceeds the training set ({n_samples})"
        )
    if n_epoch < 0:
        raise ConfigError(f"n_epoch must be >= 0, got {n_epoch}")
    total = n_epoch * n_samples
    n_full, remainder = divmod(total, episode_size)
    sizes = [episode_size] * n_full
    if remainder:
        sizes.append(remainder)
    return sizes


def sample_episode(n_samples, size, rng):
    if size > n_samples:
        raise ConfigError(f"cannot draw {size} of {n_samples} samples")
    if size < 1:
        raise ConfigError(f"episode size must be >= 1, got {size}")
    return np.sort(rng.choice(n_samples, size=size, replace=False))


def lr_schedule(step, total_steps, warmup_steps, lr_base):
    """Linear ramp to lr_base, then cosine decay to zero."""
    if warmup_steps >= total_steps:
        raise ConfigError(
            f"warmup ({warmup_steps} steps) must end before training does "
            f"({total_steps} steps)"
        )
    if warmup_steps < 0 or not 0 <= step <= total_steps:
        raise ContractError(f"step {step} outside schedule of {total_steps}")
    if step < warmup_steps:
        return lr_base * step / warmup_steps
    progress = (step - warmup_steps) / (total_steps - warmup_steps)
    return lr_base * 0.5 * (1.0 + math.cos(math.pi * progress))


@dataclass
class Episode:
    """Frozen per-episode state: features, prototypes, and targets.

    classifiers maps a supervision direction to unit-row classifier
    matrices; target_rows maps it to one pre-gathered target row per
    episode sample. pbt_means keeps the raw (unnormalized) translated
    centroids so invariants can be checked against fixed-order means.
    """

    indices: np.ndarray
    h_image: np.ndarray
    h_text: np.ndarray
    proto_sets: dict = field(default_factory=dict)
    classifiers: dict = field(default_factory=dict)
    target_tables: dict = field(default_factory=dict)
    target_rows: dict = field(default_factory=dict)
    pbt_means: dict = field(default_factory=dict)
    classifier_source: str = "none"

    @property
    def size(self):
        return len(self.indices)


def _head_features(model, x_image, x_text):
    z_i = encoders.forward_values(model.image_tower, x_image)
    z_t = encoders.forward_values(model.text_tower, x_text)
    h_i = encoders.forward_values(model.image_head, z_i)
    h_t = encoders.forward_values(model.text_head, z_t)
    return h_i, h_t


def _target_table(centroids, cfg):
    if cfg.soft_targets_enabled:
        return prototypes.soft_targets(prototypes.unit_rows(centroids), cfg.tau_y)
    return prototypes.hard_targets(centroids.shape[0])


def build_episode(ds, teacher, cfg, model, rng, size=None):
    """Sample an episode and rebuild its prototype supervision."""
    size = cfg.episode_size if size is None else size
    idx = sample_episode(ds.n_samples, size, rng)
    x_image = datamod.augment(ds.x_image[idx], cfg.sigma_augment, rng)
    h_image, h_text = _head_features(model, x_image, ds.x_text[idx])
    episode = Episode(indices=idx, h_image=h_image, h_text=h_text)
    if not (cfg.proto_enabled or cfg.teacher_enabled):
        return episode

    n_clusters = max(1, size // cfg.images_per_prototype)
    spaces = {}
    if cfg.proto_enabled:
        spaces["image"] = h_image
        spaces["text"] = h_text
    if cfg.teacher_enabled:
        spaces["external"] = teacher.features[idx]
    for tag, feats in spaces.items():
        proto_set = prototypes.kmeans(
            feats,
            n_clusters,
            max_iters=cfg.kmeans_iters,
            seed=int(rng.integers(0, 2**63)),
            space_tag=tag,
        )
        episode.proto_sets[tag] = proto_set
        episode.target_tables[tag] = _target_table(proto_set.centroids, cfg)

    episode.classifier_source = "pbt" if cfg.pbt_enabled else "centroid"

    def classifier(source_tag, student_h):
        source = episode.proto_sets[source_tag]
        if cfg.pbt_enabled:
            means = prototypes.pbt_centroids(
                source.assignments, student_h, n_clusters
            )
        else:
            means = source.centroids
        return means

    directions = []
    if cfg.proto_enabled:
        directions += [("text_for_image", "text", h_image), ("image_for_text", "image", h_text)]
    if cfg.teacher_enabled:
        directions += [
            ("external_for_image", "external", h_image),
            ("external_for_text", "external", h_text),
        ]
    for key, source_tag, student_h in directions:
        means = classifier(source_tag, student_h)
        if cfg.pbt_enabled:
            episode.pbt_means[key] = means
        episode.classifiers[key] = prototypes.unit_rows(means)
        table = episode.target_tables[source_tag]
        episode.target_rows[key] = table.rows[
            episode.proto_sets[source_tag].assignments
        ]
    return episode


def _loss_term(name, episode_index, compute):
    try:
        return compute()
    except NonFiniteError as exc:
        raise TrainingError(
            f"non-finite {name} in episode {episode_index}: {exc}"
        ) from exc


def global_grad_norm(grads):
    total = 0.0
    for g in grads.values():
        total += float(np.sum(g * g))
    return math.sqrt(total)


def clip_grads(grads, max_norm):
    """Scale all gradients so the global norm is at most max_norm."""
    norm = global_grad_norm(grads)
    if norm > max_norm:
        factor = max_norm / norm
        return {name: g * factor for name, g in grads.items()}, norm
    return grads, norm


def train_episode(
    episode, ds, cfg, model, opt, rng, episode_index, lr_for, metrics
):
    """Run minibatch steps over one episode, appending metric rows."""
    order = rng.permutation(episode.size)
    slots = _slots(model)
    n_batches = math.ceil(episode.size / cfg.batch_size)
    for b in range(n_batches):
        position = order[b * cfg.batch_size : (b + 1) * cfg.batch_size]
        sample_idx = episode.indices[position]
        x_image = datamod.augment(ds.x_image[sample_idx], cfg.sigma_augment, rng)
        x_text = ds.x_text[sample_idx]

        leaves = {name: ad.leaf(_slot_get(slot)) for name, slot in slots.items()}

        def pairs(prefix):
            i = 0
            out = []
            while f"{prefix}.w{i}" in leaves:
                out.append((leaves[f"{prefix}.w{i}"], leaves[f"{prefix}.b{i}"]))
                i += 1
            return out

        def term(name, fn):
            return _loss_term(name, episode_index, fn)

        z_i = term("image embedding", lambda: encoders.encode(pairs("image_tower"), x_image))
        z_t = term("text embedding", lambda: encoders.encode(pairs("text_tower"), x_text))
        l_clip = term(
            "contrastive loss",
            lambda: losses.info_nce(
                ad.l2_normalize_rows(z_i),
                ad.l2_normalize_rows(z_t),
                leaves["temperature.clip"],
            ),
        )
        parts = [l_clip]
        l_proto_val = 0.0
        l_external_val = 0.0
        if cfg.proto_enabled or cfg.teacher_enabled:
            h_i = term("image projection", lambda: encoders.project(pairs("image_head"), z_i))
            h_t = term("text projection", lambda: encoders.project(pairs("text_head"), z_t))

        def scores(key, h):
            return losses.proto_scores(
                h, episode.classifiers[key], leaves["temperature.proto"]
            )

        if cfg.proto_enabled:
            l_proto = term(
                "prototype loss",
                lambda: losses.proto_loss(
                    scores("text_for_image", h_i),
                    episode.target_rows["text_for_image"][position],
                    scores("image_for_text", h_t),
                    episode.target_rows["image_for_text"][position],
                ),
            )
            parts.append(l_proto)
            l_proto_val = l_proto.item()
        if cfg.teacher_enabled:
            l_external = term(
                "external prototype loss",
                lambda: losses.external_proto_loss(
                    scores("external_for_image", h_i),
                    scores("external_for_text", h_t),
                    episode.target_rows["external_for_image"][position],
                ),
            )
            parts.append(l_external)
            l_external_val = l_external.item()

        total = parts[0]
        for part in parts[1:]:
            total = ad.add(total, part)
        term("backward pass", lambda: ad.backward(total))

        grads = {name: node.grad for name, node in leaves.items()}
        grads, grad_norm = clip_grads(grads, cfg.max_grad_norm)
        step_index = len(metrics)
        lr, lr_image = lr_for(step_index)
        values = {name: _slot_get(slot) for name, slot in slots.items()}
        updated = opt.step(
            values,
            grads,
            lr_of=lambda name: lr_image if _is_image(name) else lr,
            decay_of=lambda name: 0.0 if _is_temperature(name) else cfg.weight_decay,
        )
        for name, slot in slots.items():
            _slot_set(slot, updated[name])
        losses.clip_temperature(model.tau_clip, cfg.max_inv_tau)
        losses.clip_temperature(model.tau_proto, cfg.max_inv_tau)

        metrics.append(
            {
                "episode": episode_index,
                "step": step_index,
                "loss_clip": l_clip.item(),
                "loss_proto": l_proto_val,
                "loss_external": l_external_val,
                "loss_total": total.item(),
                "tau_clip": model.tau_clip.tau,
                "tau_proto": model.tau_proto.tau,
                "lr": lr,
                "grad_norm": grad_norm,
            }
        )


def format_metrics(rows):
    lines = [METRICS_HEADER]
    for row in rows:
        lines.append(
            ",".join(
                str(row[c]) if c in ("episode", "step") else repr(float(row[c]))
                for c in METRICS_COLUMNS
            )
        )
    return "\n".join(lines) + "\n"


def write_metrics(path, rows):
    with open(path, "w", encoding="utf-8", newline="\n") as fh:
        fh.write(format_metrics(rows))


def read_metrics(path):
    with open(path, "r", encoding="utf-8") as fh:
        lines = fh.read().splitlines()
    if not lines or lines[0] != METRICS_HEADER:
        raise DataError(f"{path} is not a metrics file")
    rows = []
    for line in lines[1:]:
        cells = line.split(",")
        row = {}
        for col, cell in zip(METRICS_COLUMNS, cells):
            row[col] = int(cell) if col in ("episode", "step") else float(cell)
        rows.append(row)
    return rows


def _steps_for(size, batch_size):
    return math.ceil(size / batch_size)


def run(
    ds,
    cfg,
    teacher=None,
    model=None,
    metrics_path=None,
    checkpoint_path=None,
    episode_hook=None,
):
    """Train on the held-in split of ds for cfg.n_epoch epochs.

    Returns (model, metrics_rows). The test split selected by
    cfg.split_fraction and cfg.seed_split is never touched here; pass the
    same config to evaluation to score it.
    """
    validate(cfg)
    if cfg.teacher_enabled:
        if teacher is None:
            raise ConfigError("teacher_enabled needs a teacher cache")
        if teacher.features.shape[0] != ds.n_samples:
            raise DataError(
                f"teacher rows ({teacher.features.shape[0]}) do not match "
                f"dataset rows ({ds.n_samples})"
            )
        if teacher.features.shape[1] != cfg.teacher_dim:
            raise ConfigError(
                f"teacher cache width ({teacher.features.shape[1]}) does not "
                f"match teacher_dim ({cfg.teacher_dim})"
            )

    train_idx, _ = datamod.split_indices(
        ds.n_samples, cfg.split_fraction, cfg.seed_split
    )
    ds_train = datamod.take(ds, train_idx)
    teacher_train = None
    if cfg.teacher_enabled:
        teacher_train = datamod.TeacherCache(
            features=teacher.features[train_idx],
            source_dim=teacher.source_dim,
            basis=teacher.basis,
        )

    if model is None:
        model = build_model(cfg)
    schedule = episode_schedule(ds_train.n_samples, cfg.episode_size, cfg.n_epoch)
    metrics = []
    if schedule:
        step_counts = [_steps_for(size, cfg.batch_size) for size in schedule]
        total_steps = sum(step_counts)
        warmup_steps = cfg.warmup_episodes * _steps_for(
            cfg.episode_size, cfg.batch_size
        )
        if warmup_steps >= total_steps:
            raise ConfigError(
                f"warmup_episodes ({cfg.warmup_episodes}) covers all "
                f"{total_steps} steps of this run"
            )
        lock_step = total_steps
        if cfg.lock_image_fraction > 0.0:
            lock_step = max(1, round(cfg.lock_image_fraction * total_steps))
            if warmup_steps >= lock_step:
                raise ConfigError(
                    "lock_image_fraction ends the image schedule inside warmup"
                )

        def lr_for(step):
            lr = lr_schedule(step, total_steps, warmup_steps, cfg.lr_base)
            if lock_step == total_steps:
                return lr, lr
            if step >= lock_step:
                return lr, 0.0
            return lr, lr_schedule(step, lock_step, warmup_steps, cfg.lr_base)

        opt = AdamW(
            {name: arr.shape for name, arr in named_tensors(model).items()},
            beta1=cfg.adam_beta1,
            beta2=cfg.adam_beta2,
            eps=cfg.adam_eps,
        )
        rng = np.random.default_rng(cfg.seed_train)
        for episode_index, size in enumerate(schedule):
            episode = build_episode(ds_train, teacher_train, cfg, model, rng, size)
            if episode_hook is not None:
                episode_hook(episode_index, episode, model)
            train_episode(
                episode, ds_train, cfg, model, opt, rng,
                episode_index, lr_for, metrics,
            )

    if metrics_path is not None:
        write_metrics(metrics_path, metrics)
    if checkpoint_path is not None:
        save_model(checkpoint_path, model)
    return model, metrics
