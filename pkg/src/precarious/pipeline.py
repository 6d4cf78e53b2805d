"""Staged domain adaptation and the experiment harness.

Datasets carry a role (S source, T target train, I imposters, targetTest).
A schedule is a sequence of training stages over S, T and T+I; parameters
are carried from stage to stage. The harness builds the toy shifted domains
for one seed, trains the discriminator, selects imposters and runs the
requested schedules, reporting miss rate at 0.1 FPPI.
"""

import hashlib
import json
import os
from dataclasses import asdict, dataclass, field, replace

import numpy as np

from .autodiff import OptimizerConfig
from .detector import AnchorSpec, detect_many, init_detector, make_targets, to_tensor, train_detector
from .discriminator import score_batch, train_discriminator
from .evaluation import compute_roc, miss_rate_at
from .imposter import score_pool, select_imposters
from .render import ImageBuffer, downsample_for_discriminator, render
from .scene import (CameraModel, GroundTruthLabel, SceneConstraints, TargetPriorConfig, dump_jsonl, labels_of,
                    load_jsonl, sample_scene, sample_target_scene)
from .seeding import derive

ROLES = ("S", "T", "I", "targetTest")
SCHEDULES = ("S", "T", "S>T", "S>T+I", "S>T+I>T")


class ConfigError(ValueError):
    """Invalid or incomplete experiment configuration."""


# -- datasets ------------------------------------------------------------------


@dataclass
class LabeledDataset:
    name: str
    role: str
    images: list
    labels: list
    scenes: list = None
    element_roles: list = None
    _cache: dict = field(default_factory=dict, repr=False, compare=False)

    def __post_init__(self):
        if self.role not in ROLES and self.role != "T+I":
            raise ValueError(f"unknown dataset role {self.role!r}")
        if len(self.images) != len(self.labels):
            raise ValueError("one label per image is required")
        if self.element_roles is None:
            self.element_roles = [self.role] * len(self.images)

    def __len__(self):
        return len(self.images)

    @property
    def boxes(self):
        return [list(l.boxes) for l in self.labels]

    def resolution(self):
        if not self.images:
            return None
        return (self.images[0].width, self.images[0].height)

    def tensor(self):
        if "x" not in self._cache:
            self._cache["x"] = to_tensor(self.images) if self.images else None
        return self._cache["x"]

    def targets(self, anchors, regress_iou=None):
        key = ("targets", regress_iou, hashlib.sha1(anchors.tobytes()).hexdigest())
        if key not in self._cache:
            self._cache[key] = make_targets(anchors, self.boxes, regress_iou)
        return self._cache[key]

    def subset(self, indices, name=None, role=None):
        idx = [int(i) for i in indices]
        return LabeledDataset(name or self.name, role or self.role, [self.images[i] for i in idx],
                              [self.labels[i] for i in idx],
                              [self.scenes[i] for i in idx] if self.scenes is not None else None)


def build_union(t_set, i_set, seed=0):
    """T and I concatenated and shuffled by ``seed``; per-element roles kept."""
    rt, ri = t_set.resolution(), i_set.resolution()
    if rt is not None and ri is not None and rt != ri:
        raise ValueError(f"resolution mismatch: T is {rt}, I is {ri}")
    images = list(t_set.images) + list(i_set.images)
    labels = list(t_set.labels) + list(i_set.labels)
    roles = list(t_set.element_roles) + list(i_set.element_roles)
    if len(i_set) == 0:
        return LabeledDataset(t_set.name, t_set.role, images, labels, element_roles=roles)
    order = np.random.Generator(np.random.PCG64(derive(seed, "union"))).permutation(len(images))
    return LabeledDataset(f"{t_set.name}+{i_set.name}", "T+I", [images[i] for i in order],
                          [labels[i] for i in order], element_roles=[roles[i] for i in order])


def save_dataset(dataset, directory):
    """images/NNNNNN.ppm, annotations.jsonl and (when known) scenes.jsonl; returns written paths."""
    os.makedirs(os.path.join(directory, "images"), exist_ok=True)
    written = []
    for i, im in enumerate(dataset.images):
        rel = f"images/{i:06d}.ppm"
        im.save(os.path.join(directory, rel))
        written.append(rel)
    with open(os.path.join(directory, "annotations.jsonl"), "w", encoding="utf-8") as fh:
        for i, lab in enumerate(dataset.labels):
            fh.write(json.dumps({"imageId": f"{i:06d}", **lab.to_json()}, sort_keys=True) + "\n")
    written.append("annotations.jsonl")
    if dataset.scenes is not None:
        dump_jsonl(dataset.scenes, os.path.join(directory, "scenes.jsonl"))
        written.append("scenes.jsonl")
    return written


def load_dataset(directory, name=None, role="S", target=False):
    with open(os.path.join(directory, "annotations.jsonl"), encoding="utf-8") as fh:
        rows = [json.loads(line) for line in fh if line.strip()]
    labels = [GroundTruthLabel.from_json(r) for r in rows]
    images = [ImageBuffer.load(os.path.join(directory, "images", f"{r['imageId']}.ppm")) for r in rows]
    scenes_path = os.path.join(directory, "scenes.jsonl")
    scenes = load_jsonl(scenes_path, target) if os.path.exists(scenes_path) else None
    return LabeledDataset(name or os.path.basename(os.path.normpath(directory)), role, images, labels, scenes)


# -- configuration -------------------------------------------------------------


@dataclass(frozen=True)
class StageConfig:
    epochs: int = 6
    learning_rate: float = 1e-2
    frozen_layers: int = 0


@dataclass(frozen=True)
class ExperimentConfig:
    """Everything one experiment needs. Sizes are multiplied by ``size_factor``.

    Keys (JSON, snake_case): seeds, size_factor, n_source, n_target_train,
    n_target_test, n_disc_synthetic, pool_size, k, image_size, disc_size,
    depth_range, anchor_scales, positive_weight, regress_iou, grad_clip, nms_iou,
    batch_size, momentum, pretrain, adapt, finetune (each
    {epochs, learning_rate, frozen_layers}), disc_epochs, disc_learning_rate,
    disc_batch_size, schedules.
    """

    seeds: tuple = (0, 1, 2, 3, 4)
    size_factor: float = 1.0
    n_source: int = 240
    n_target_train: int = 40
    n_target_test: int = 200
    n_disc_synthetic: int = 80
    pool_size: int = 320
    k: int = None
    image_size: tuple = (128, 96)
    disc_size: tuple = (96, 72)
    depth_range: tuple = (4.0, 10.0)
    anchor_scales: tuple = (12.0, 24.0, 48.0)
    positive_weight: float = 10.0
    regress_iou: float = 0.3
    grad_clip: float = 10.0
    nms_iou: float = 0.5
    batch_size: int = 8
    momentum: float = 0.9
    pretrain: StageConfig = StageConfig(16, 1e-1, 0)
    adapt: StageConfig = StageConfig(16, 1e-2, 2)
    finetune: StageConfig = StageConfig(16, 3e-3, 2)
    disc_epochs: int = 10
    disc_learning_rate: float = 2e-3
    disc_batch_size: int = 16
    schedules: tuple = SCHEDULES

    def __post_init__(self):
        if self.size_factor <= 0:
            raise ConfigError("size_factor must be positive")
        for s in self.schedules:
            if s not in SCHEDULES:
                raise ConfigError(f"unknown schedule {s!r}; expected one of {SCHEDULES}")
        if not self.seeds:
            raise ConfigError("at least one seed is required")

    @classmethod
    def full_scale(cls, **kw):
        """Pool of 8000 synthetic images with 200 imposters selected (2.5%)."""
        return cls(pool_size=8000, k=200, **kw)

    @property
    def imposter_fraction(self):
        return self.k_default / self.sizes["pool"]

    def scaled(self, n):
        return max(1, int(round(n * self.size_factor)))

    @property
    def sizes(self):
        return {"S": self.scaled(self.n_source), "T": self.scaled(self.n_target_train),
                "targetTest": self.scaled(self.n_target_test),
                "discSynthetic": self.scaled(self.n_disc_synthetic), "pool": self.scaled(self.pool_size)}

    @property
    def k_default(self):
        return self.sizes["T"] if self.k is None else self.scaled(self.k)

    def camera(self):
        w, h = self.image_size
        return CameraModel().scaled(w, h)

    def anchor_spec(self):
        return AnchorSpec(scales=tuple(self.anchor_scales))

    def constraints(self):
        return SceneConstraints(depth_range=tuple(self.depth_range))

    def to_json(self):
        out = asdict(self)
        out["seeds"] = list(self.seeds)
        out["schedules"] = list(self.schedules)
        return out

    @classmethod
    def from_json(cls, obj):
        known = set(cls.__dataclass_fields__)
        unknown = set(obj) - known
        if unknown:
            raise ConfigError(f"unknown configuration keys: {sorted(unknown)}")
        kw = dict(obj)
        try:
            for name in ("pretrain", "adapt", "finetune"):
                if name in kw:
                    kw[name] = StageConfig(**kw[name])
            for name in ("seeds", "image_size", "disc_size", "depth_range", "anchor_scales", "schedules"):
                if name in kw:
                    kw[name] = tuple(kw[name])
            return cls(**kw)
        except TypeError as exc:
            raise ConfigError(str(exc)) from exc

    @classmethod
    def load(cls, path):
        try:
            with open(path, encoding="utf-8") as fh:
                obj = json.load(fh)
        except (OSError, json.JSONDecodeError) as exc:
            raise ConfigError(f"cannot read config {path}: {exc}") from exc
        return cls.from_json(obj)


# -- synthesis -----------------------------------------------------------------


def synthesize(config, seed, domain, count, name, role, jobs=1):
    """Sample, render and label ``count`` scenes of the given domain."""
    if domain not in ("source", "target"):
        raise ConfigError(f"unknown domain {domain!r}")
    tasks = [(config, domain, derive(seed, "scene", name, i)) for i in range(count)]
    if jobs > 1 and count > 1:
        from concurrent.futures import ProcessPoolExecutor

        with ProcessPoolExecutor(jobs) as ex:
            items = list(ex.map(_synth_one, tasks, chunksize=16))
    else:
        items = [_synth_one(t) for t in tasks]
    scenes = [p for p, _, _ in items]
    images = [im for _, im, _ in items]
    labels = [lab for _, _, lab in items]
    return LabeledDataset(name, role, images, labels, scenes)


def _synth_one(task):
    config, domain, s = task
    camera, constraints = config.camera(), config.constraints()
    if domain == "target":
        p = sample_target_scene(s, camera, constraints, TargetPriorConfig())
    else:
        p = sample_scene(s, camera, constraints)
    return p, render(p, camera), labels_of(p, camera)


def disc_images(config, dataset):
    return [downsample_for_discriminator(im, tuple(config.disc_size)) for im in dataset.images]


# -- schedules -----------------------------------------------------------------


@dataclass(frozen=True)
class Stage:
    dataset: str  # "S", "T" or "T+I"
    epochs: int
    learning_rate: float
    frozen_layers: int = 0


@dataclass(frozen=True)
class SchedulePlan:
    name: str
    stages: tuple


def plan_for(name, config):
    """The stage list for one of the five schedule names.

    The first stage trains from initialisation with the pretrain settings;
    a later T+I stage uses the adapt settings and a later T stage the
    finetune settings.
    """
    if name not in SCHEDULES:
        raise ConfigError(f"unknown schedule {name!r}; expected one of {SCHEDULES}")
    parts = name.split(">")
    stages = []
    for i, part in enumerate(parts):
        sc = config.pretrain if i == 0 else (config.adapt if part == "T+I" else config.finetune)
        stages.append(Stage(part, sc.epochs, sc.learning_rate, sc.frozen_layers))
    return SchedulePlan(name, tuple(stages))


def _stage_key(seed, stages, imposter_tag):
    uses_i = any(st.dataset == "T+I" for st in stages)
    return (seed, imposter_tag if uses_i else None) + tuple(stages)


def run_schedule(plan, datasets, config, seed, checkpoint_dir=None, cache=None, init=None,
                 imposter_tag=None):
    """Run every stage in order, carrying parameters forward.

    ``datasets`` maps "S", "T" and (when referenced) "I" to LabeledDatasets.
    ``cache`` (a dict) shares identical stage prefixes between schedules;
    ``imposter_tag`` must identify the I set whenever a cache is used.
    Returns (final model, per-stage models).
    """
    for st in plan.stages:
        needed = ("T", "I") if st.dataset == "T+I" else (st.dataset,)
        for role in needed:
            if role not in datasets:
                raise ConfigError(f"schedule {plan.name} needs dataset {role}")
    model = init or init_detector(derive(seed, "detector-init"), tuple(config.image_size), config.anchor_spec())
    stage_models = []
    done = []
    for i, st in enumerate(plan.stages):
        done.append(st)
        key = _stage_key(seed, done, imposter_tag)
        if cache is not None and key in cache:
            model = cache[key]
        else:
            model = run_stage(model, st, i, datasets, config, seed)
            if cache is not None:
                cache[key] = model
        stage_models.append(model)
        if checkpoint_dir is not None:
            model.save(f"{checkpoint_dir}/{plan_slug(plan.name)}.stage{i}.ckpt")
    return model, stage_models


def plan_slug(name):
    return name.replace(">", "_then_").replace("+", "_plus_")


def stage_dataset(st, datasets, seed, index):
    if st.dataset == "T+I":
        return build_union(datasets["T"], datasets["I"], derive(seed, "union", index))
    return datasets[st.dataset]


def run_stage(model, st, index, datasets, config, seed):
    """One training stage; depends only on its inputs (rerunnable in isolation)."""
    data = stage_dataset(st, datasets, seed, index)
    if st.epochs == 0 or len(data) == 0:
        return model
    opt = OptimizerConfig(learning_rate=st.learning_rate, momentum=config.momentum,
                          batch_size=config.batch_size, epochs=st.epochs, seed=seed,
                          grad_clip=config.grad_clip)
    model, _ = train_detector(model, data.tensor(), None, opt, frozen_layers=st.frozen_layers,
                              label=("stage", index, st.dataset), targets=data.targets(model.anchors, config.regress_iou),
                              positive_weight=config.positive_weight)
    return model


# -- evaluation ----------------------------------------------------------------


@dataclass
class EvalResult:
    miss_rate_50: float
    miss_rate_70: float
    roc_50: object
    roc_70: object


def evaluate_model(model, dataset, fppi=0.1, nms_iou=0.5):
    dets = detect_many(model, dataset.tensor(), nms_iou=nms_iou)
    per_image = [(d, list(l.boxes)) for d, l in zip(dets, dataset.labels)]
    r50 = compute_roc(per_image, 0.5)
    r70 = compute_roc(per_image, 0.7)
    return EvalResult(miss_rate_at(r50, fppi), miss_rate_at(r70, fppi), r50, r70)


# -- experiment harness --------------------------------------------------------


@dataclass
class SeedData:
    seed: int
    source: LabeledDataset
    target: LabeledDataset
    target_test: LabeledDataset
    disc_synthetic: LabeledDataset
    pool: LabeledDataset
    stage_cache: dict = field(default_factory=dict)


def prepare_seed(config, seed, jobs=1):
    sz = config.sizes
    return SeedData(
        seed,
        synthesize(config, seed, "source", sz["S"], "source", "S", jobs),
        synthesize(config, seed, "target", sz["T"], "target-train", "T", jobs),
        synthesize(config, seed, "target", sz["targetTest"], "target-test", "targetTest", jobs),
        synthesize(config, seed, "source", sz["discSynthetic"], "disc-synthetic", "S", jobs),
        synthesize(config, seed, "source", sz["pool"], "pool", "S", jobs),
    )


def train_disc_for(config, data):
    """Discriminator on T (real) vs a fresh synthetic set; returns (final, snapshots, records)."""
    opt = OptimizerConfig(learning_rate=config.disc_learning_rate, momentum=config.momentum,
                          batch_size=config.disc_batch_size, epochs=config.disc_epochs,
                          seed=derive(data.seed, "discriminator"))
    return train_discriminator(disc_images(config, data.target), disc_images(config, data.disc_synthetic),
                               opt, input_size=tuple(config.disc_size))


def pool_scores(config, disc, data):
    key = ("pool-scores", hashlib.sha1(disc.checkpoint_bytes()).hexdigest())
    if key not in data.stage_cache:
        data.stage_cache[key] = score_pool(disc, disc_images_cached(config, data))
    return data.stage_cache[key]


def disc_images_cached(config, data):
    if "pool-disc" not in data.stage_cache:
        data.stage_cache["pool-disc"] = disc_images(config, data.pool)
    return data.stage_cache["pool-disc"]


def imposters_from(config, data, disc, k):
    chosen = select_imposters(pool_scores(config, disc, data), k, pool_id=f"pool-seed{data.seed}")
    return data.pool.subset(chosen.indices, name="imposters", role="I"), chosen


def marginal_adaptation_gap(config, data, disc, imposter_set):
    """(|mean D(I) - mean D(T)|, |mean D(random) - mean D(T)|) for an equal-size random subset."""
    t_mean = float(np.mean(score_batch(disc, disc_images(config, data.target))))
    scores = np.array([s.score for s in pool_scores(config, disc, data)])
    i_mean = float(scores[imposter_set.indices].mean())
    rng = np.random.Generator(np.random.PCG64(derive(data.seed, "random-subset")))
    rand = rng.choice(len(scores), size=len(imposter_set), replace=False)
    return abs(i_mean - t_mean), abs(float(scores[rand].mean()) - t_mean)


@dataclass
class ResultRow:
    schedule: str
    seed: int
    miss_rate_50: float
    miss_rate_70: float
    tag: str = ""


def run_schedules(config, data, schedules, imposters=None, row_tag="", checkpoint_dir=None):
    datasets = {"S": data.source, "T": data.target}
    if imposters is not None:
        datasets["I"] = imposters
    tag = None
    if imposters is not None:
        tag = hashlib.sha1(repr([s.seed for s in imposters.scenes]).encode()).hexdigest()
    rows, models = [], {}
    for name in schedules:
        model, _ = run_schedule(plan_for(name, config), datasets, config, data.seed, checkpoint_dir,
                                cache=data.stage_cache, imposter_tag=tag)
        ev = evaluate_model(model, data.target_test, nms_iou=config.nms_iou)
        rows.append(ResultRow(name, data.seed, ev.miss_rate_50, ev.miss_rate_70, row_tag))
        models[name] = model
    return rows, models


def run_table2(config, seeds=None, jobs=1, log=None, checkpoint_dir=None):
    """All configured schedules for every seed; returns result rows.

    With ``checkpoint_dir`` every stage checkpoint is written under
    ``seed<N>/`` and the discriminator as ``seed<N>/disc.ckpt``.
    """
    rows = []
    for seed in seeds if seeds is not None else config.seeds:
        data = prepare_seed(config, seed, jobs)
        disc, _, _ = train_disc_for(config, data)
        imposters, _ = imposters_from(config, data, disc, config.k_default)
        out = None
        if checkpoint_dir is not None:
            out = os.path.join(checkpoint_dir, f"seed{seed}")
            os.makedirs(out, exist_ok=True)
            disc.save(os.path.join(out, "disc.ckpt"))
        r, _ = run_schedules(config, data, config.schedules, imposters, checkpoint_dir=out)
        rows += r
        if log:
            for row in r:
                log(f"seed {seed} {row.schedule}: {row.miss_rate_50:.4f} / {row.miss_rate_70:.4f}")
    return rows


def medians(rows, attr="miss_rate_50", key="schedule"):
    groups = {}
    for r in rows:
        groups.setdefault(getattr(r, key), []).append(getattr(r, attr))
    return {k: float(np.median(v)) for k, v in groups.items()}


def write_results_csv(rows, path):
    with open(path, "w", encoding="utf-8", newline="\n") as fh:
        fh.write("schedule,seed,missRate@0.1FPPI_overlap0.5,missRate@0.1FPPI_overlap0.7\n")
        for r in rows:
            fh.write(f"{r.schedule},{r.seed},{r.miss_rate_50:.10f},{r.miss_rate_70:.10f}\n")


def with_sizes(config, **kw):
    return replace(config, **kw)
